//! C ABI for descriptor extraction.
//!
//! A checkpoint loads into an opaque [`PdNet`] handle; callers hand in
//! patch pixel buffers and receive descriptor rows. Every entry point
//! returns a [`PdStatus`]; on failure a human-readable message is kept in
//! thread-local storage and readable through [`pd_last_error`] until the
//! next call on the same thread.
//!
//! The generated header lives at `include/patchdesc.h`.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::os::raw::c_char;
use std::path::Path;

use patchdesc::checkpoint::load_checkpoint;
use patchdesc::data::{normalize_patch, INPUT_SIZE, PATCH_SIZE};
use patchdesc::model::{describe, NetworkParams};
use patchdesc::tensor::Tensor;
use patchdesc::Error;

/// Opaque handle to a loaded descriptor network.
pub struct PdNet {
    params: NetworkParams<f32>,
}

/// Status code of every C entry point.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PdStatus {
    PdOk = 0,
    PdNullArgument = 1,
    PdInvalidArgument = 2,
    PdIoError = 3,
    PdFormatError = 4,
    PdShapeError = 5,
    PdInternalError = 6,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: PdStatus, msg: &str) -> PdStatus {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(cleaned).unwrap_or_default();
    });
    status
}

fn fail_with(err: &Error) -> PdStatus {
    let status = match err {
        Error::Shape { .. } => PdStatus::PdShapeError,
        Error::Invalid { .. } | Error::NonFinite { .. } => PdStatus::PdInvalidArgument,
        Error::Format { .. } | Error::Parse { .. } => PdStatus::PdFormatError,
        Error::Io { .. } => PdStatus::PdIoError,
    };
    fail(status, &err.to_string())
}

fn ok() -> PdStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::default());
    PdStatus::PdOk
}

/// Loads a trained checkpoint into a fresh handle.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
/// The returned handle must be released with [`pd_net_free`].
#[no_mangle]
pub unsafe extern "C" fn pd_net_load(path: *const c_char, out: *mut *mut PdNet) -> PdStatus {
    if path.is_null() || out.is_null() {
        return fail(PdStatus::PdNullArgument, "path and out must be non-null");
    }
    let path = match CStr::from_ptr(path).to_str() {
        Ok(s) => Path::new(s),
        Err(_) => return fail(PdStatus::PdInvalidArgument, "path is not valid UTF-8"),
    };
    match load_checkpoint(path) {
        Ok(ckpt) => {
            *out = Box::into_raw(Box::new(PdNet {
                params: ckpt.params,
            }));
            ok()
        }
        Err(e) => fail_with(&e),
    }
}

/// Releases a handle returned by [`pd_net_load`]. Null is a no-op.
///
/// # Safety
/// `net` must be a pointer previously returned by [`pd_net_load`] that has
/// not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn pd_net_free(net: *mut PdNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Descriptor dimensionality of the loaded network; 0 on a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_net_descriptor_dim(net: *const PdNet) -> u32 {
    net.as_ref()
        .map_or(0, |n| n.params.config.descriptor_dim as u32)
}

/// Side length of the normalized input the network consumes (32 for the
/// standard architecture); 0 on a null handle.
///
/// # Safety
/// `net` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pd_net_input_size(net: *const PdNet) -> u32 {
    net.as_ref().map_or(0, |n| n.params.config.input_size as u32)
}

/// Side length of raw stored patches accepted by [`pd_net_describe_raw`].
#[no_mangle]
pub extern "C" fn pd_patch_size() -> u32 {
    PATCH_SIZE as u32
}

unsafe fn describe_common(
    net: *const PdNet,
    patches: *const f32,
    count: usize,
    out: *mut f32,
    raw: bool,
) -> PdStatus {
    let Some(net) = net.as_ref() else {
        return fail(PdStatus::PdNullArgument, "net handle is null");
    };
    if count == 0 {
        return ok();
    }
    if patches.is_null() || out.is_null() {
        return fail(PdStatus::PdNullArgument, "patches and out must be non-null");
    }
    let side = if raw {
        PATCH_SIZE
    } else {
        net.params.config.input_size
    };
    let per = side * side;
    let dim = net.params.config.descriptor_dim;
    let input = std::slice::from_raw_parts(patches, count * per);
    let output = std::slice::from_raw_parts_mut(out, count * dim);

    // Bounded batches keep peak memory flat for large extractions.
    const CHUNK: usize = 256;
    let mut done = 0;
    while done < count {
        let take = CHUNK.min(count - done);
        let batch = if raw {
            let mut data = Vec::with_capacity(take * INPUT_SIZE * INPUT_SIZE);
            let mut failed = None;
            for i in 0..take {
                let patch = Tensor::from_vec(
                    &[1, PATCH_SIZE, PATCH_SIZE],
                    input[(done + i) * per..(done + i + 1) * per].to_vec(),
                );
                match patch.and_then(|p| normalize_patch(&p)) {
                    Ok(n) => data.extend_from_slice(n.data()),
                    Err(e) => {
                        failed = Some(e);
                        break;
                    }
                }
            }
            if let Some(e) = failed {
                return fail_with(&e);
            }
            Tensor::from_vec(&[take, 1, INPUT_SIZE, INPUT_SIZE], data)
        } else {
            Tensor::from_vec(
                &[take, 1, side, side],
                input[done * per..(done + take) * per].to_vec(),
            )
        };
        let batch = match batch {
            Ok(b) => b,
            Err(e) => return fail_with(&e),
        };
        match describe(&net.params, &batch) {
            Ok(desc) => {
                output[done * dim..(done + take) * dim].copy_from_slice(desc.data());
            }
            Err(e) => return fail_with(&e),
        }
        done += take;
    }
    ok()
}

/// Descriptors for `count` already-normalized patches.
///
/// `patches` holds `count × input_size × input_size` floats (row-major, one
/// patch after another, as produced by the library's normalization); `out`
/// receives `count × descriptor_dim` floats.
///
/// # Safety
/// The buffers must be valid for the extents above.
#[no_mangle]
pub unsafe extern "C" fn pd_net_describe(
    net: *const PdNet,
    patches: *const f32,
    count: usize,
    out: *mut f32,
) -> PdStatus {
    describe_common(net, patches, count, out, false)
}

/// Descriptors for `count` raw stored patches of `pd_patch_size()` side
/// length with values in [0, 1]; the standard 2×2 average downsample and
/// per-patch standardization is applied first.
///
/// # Safety
/// The buffers must be valid for `count × 64 × 64` input floats and
/// `count × descriptor_dim` output floats.
#[no_mangle]
pub unsafe extern "C" fn pd_net_describe_raw(
    net: *const PdNet,
    patches: *const f32,
    count: usize,
    out: *mut f32,
) -> PdStatus {
    describe_common(net, patches, count, out, true)
}

/// Message of the most recent failure on this thread; empty string after a
/// success. The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn pd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}
