#ifndef PATCHDESC_H
#define PATCHDESC_H

/* Generated by cbindgen from patchdesc-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status code of every C entry point.
typedef enum PdStatus {
  PD_OK = 0,
  PD_NULL_ARGUMENT = 1,
  PD_INVALID_ARGUMENT = 2,
  PD_IO_ERROR = 3,
  PD_FORMAT_ERROR = 4,
  PD_SHAPE_ERROR = 5,
  PD_INTERNAL_ERROR = 6,
} PdStatus;

// Opaque handle to a loaded descriptor network.
typedef struct PdNet PdNet;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Loads a trained checkpoint into a fresh handle.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be a valid pointer.
// The returned handle must be released with [`pd_net_free`].
enum PdStatus pd_net_load(const char *path, struct PdNet **out);

// Releases a handle returned by [`pd_net_load`]. Null is a no-op.
//
// # Safety
// `net` must be a pointer previously returned by [`pd_net_load`] that has
// not been freed yet.
void pd_net_free(struct PdNet *net);

// Descriptor dimensionality of the loaded network; 0 on a null handle.
//
// # Safety
// `net` must be null or a live handle.
uint32_t pd_net_descriptor_dim(const struct PdNet *net);

// Side length of the normalized input the network consumes (32 for the
// standard architecture); 0 on a null handle.
//
// # Safety
// `net` must be null or a live handle.
uint32_t pd_net_input_size(const struct PdNet *net);

// Side length of raw stored patches accepted by [`pd_net_describe_raw`].
uint32_t pd_patch_size(void);

// Descriptors for `count` already-normalized patches.
//
// `patches` holds `count × input_size × input_size` floats (row-major, one
// patch after another, as produced by the library's normalization); `out`
// receives `count × descriptor_dim` floats.
//
// # Safety
// The buffers must be valid for the extents above.
enum PdStatus pd_net_describe(const struct PdNet *net,
                              const float *patches,
                              size_t count,
                              float *out);

// Descriptors for `count` raw stored patches of `pd_patch_size()` side
// length with values in [0, 1]; the standard 2×2 average downsample and
// per-patch standardization is applied first.
//
// # Safety
// The buffers must be valid for `count × 64 × 64` input floats and
// `count × descriptor_dim` output floats.
enum PdStatus pd_net_describe_raw(const struct PdNet *net,
                                  const float *patches,
                                  size_t count,
                                  float *out);

// Message of the most recent failure on this thread; empty string after a
// success. The pointer stays valid until the next call on the same thread.
const char *pd_last_error(void);

// Library version as a static NUL-terminated string.
const char *pd_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCHDESC_H */
