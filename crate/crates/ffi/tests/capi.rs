//! Exercises the C entry points the way a foreign caller would: through
//! raw pointers and status codes, with results cross-checked against the
//! Rust library.

use std::ffi::{CStr, CString};
use std::ptr;

use patchdesc::checkpoint::{save_checkpoint, Checkpoint};
use patchdesc::data::{normalize_patch, PATCH_SIZE};
use patchdesc::model::{describe, init_params_with, NetworkConfig};
use patchdesc::tensor::Tensor;

use patchdesc_ffi::*;

fn write_tiny_checkpoint(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = NetworkConfig::custom(32, 2, 4, 8).unwrap();
    let params = init_params_with::<f32>(cfg, 42).unwrap();
    let path = dir.join("net.ckpt");
    save_checkpoint(&Checkpoint::fresh(params, 42), &path).unwrap();
    path
}

fn c_path(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

#[test]
fn load_describe_and_free_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = write_tiny_checkpoint(dir.path());

    let mut net: *mut PdNet = ptr::null_mut();
    let status = unsafe { pd_net_load(c_path(&ckpt_path).as_ptr(), &mut net) };
    assert_eq!(status, PdStatus::PdOk);
    assert!(!net.is_null());
    unsafe {
        assert_eq!(pd_net_descriptor_dim(net), 8);
        assert_eq!(pd_net_input_size(net), 32);
    }
    assert_eq!(pd_patch_size(), 64);

    // One raw 64x64 patch through the C surface...
    let raw: Vec<f32> = (0..PATCH_SIZE * PATCH_SIZE)
        .map(|i| ((i * 31) % 255) as f32 / 255.0)
        .collect();
    let mut out = vec![0f32; 8];
    let status = unsafe { pd_net_describe_raw(net, raw.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, PdStatus::PdOk);

    // ...must agree bitwise with the library pipeline.
    let patch = Tensor::from_vec(&[1, PATCH_SIZE, PATCH_SIZE], raw.clone()).unwrap();
    let normalized = normalize_patch(&patch).unwrap();
    let batch = Tensor::from_vec(&[1, 1, 32, 32], normalized.data().to_vec()).unwrap();
    let cfg = NetworkConfig::custom(32, 2, 4, 8).unwrap();
    let params = init_params_with::<f32>(cfg, 42).unwrap();
    let want = describe(&params, &batch).unwrap();
    assert_eq!(out, want.data());

    // The pre-normalized entry point gives the same answer.
    let mut out2 = vec![0f32; 8];
    let status =
        unsafe { pd_net_describe(net, normalized.data().as_ptr(), 1, out2.as_mut_ptr()) };
    assert_eq!(status, PdStatus::PdOk);
    assert_eq!(out2, out);

    unsafe { pd_net_free(net) };
}

#[test]
fn batched_calls_match_single_calls() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = write_tiny_checkpoint(dir.path());
    let mut net: *mut PdNet = ptr::null_mut();
    unsafe {
        assert_eq!(
            pd_net_load(c_path(&ckpt_path).as_ptr(), &mut net),
            PdStatus::PdOk
        );
    }

    let count = 5;
    let per = 32 * 32;
    let patches: Vec<f32> = (0..count * per)
        .map(|i| ((i as f32) * 0.37).sin() * 0.8)
        .collect();
    let mut batched = vec![0f32; count * 8];
    unsafe {
        assert_eq!(
            pd_net_describe(net, patches.as_ptr(), count, batched.as_mut_ptr()),
            PdStatus::PdOk
        );
    }
    for i in 0..count {
        let mut single = vec![0f32; 8];
        unsafe {
            assert_eq!(
                pd_net_describe(net, patches[i * per..].as_ptr(), 1, single.as_mut_ptr()),
                PdStatus::PdOk
            );
        }
        assert_eq!(&batched[i * 8..(i + 1) * 8], &single[..], "row {i}");
    }

    // Zero-count is a successful no-op even with null buffers.
    unsafe {
        assert_eq!(
            pd_net_describe(net, ptr::null(), 0, ptr::null_mut()),
            PdStatus::PdOk
        );
        pd_net_free(net);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let mut net: *mut PdNet = ptr::null_mut();

    // Null arguments.
    let status = unsafe { pd_net_load(ptr::null(), &mut net) };
    assert_eq!(status, PdStatus::PdNullArgument);

    // Missing file.
    let missing = CString::new("/nonexistent/net.ckpt").unwrap();
    let status = unsafe { pd_net_load(missing.as_ptr(), &mut net) };
    assert_eq!(status, PdStatus::PdIoError);
    let msg = unsafe { CStr::from_ptr(pd_last_error()) };
    assert!(!msg.to_bytes().is_empty());

    // Not a checkpoint.
    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"definitely not a checkpoint file, long enough to read").unwrap();
    let status = unsafe { pd_net_load(c_path(&junk).as_ptr(), &mut net) };
    assert_eq!(status, PdStatus::PdFormatError);

    // Describe on a null handle.
    let mut out = vec![0f32; 8];
    let status = unsafe { pd_net_describe(ptr::null(), out.as_ptr(), 1, out.as_mut_ptr()) };
    assert_eq!(status, PdStatus::PdNullArgument);

    // Success clears the error message.
    let ckpt_path = write_tiny_checkpoint(dir.path());
    unsafe {
        assert_eq!(
            pd_net_load(c_path(&ckpt_path).as_ptr(), &mut net),
            PdStatus::PdOk
        );
        assert!(CStr::from_ptr(pd_last_error()).to_bytes().is_empty());
        pd_net_free(net);
    }

    let version = unsafe { CStr::from_ptr(pd_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
