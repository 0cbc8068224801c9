#ifndef NTSCC_H
#define NTSCC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum NtsccStatus {
  NTSCC_STATUS_OK = 0,
  NTSCC_STATUS_NULL_POINTER = 1,
  NTSCC_STATUS_INVALID_ARGUMENT = 2,
  NTSCC_STATUS_DIMENSION_MISMATCH = 3,
  NTSCC_STATUS_OUT_OF_RANGE = 4,
  NTSCC_STATUS_IO = 5,
  NTSCC_STATUS_FORMAT = 6,
  NTSCC_STATUS_INTERNAL = 7,
  NTSCC_STATUS_PANIC = 8,
} NtsccStatus;

/**
 * Opaque model handle.
 */
typedef struct NtsccModelHandle NtsccModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. Valid until the next
 * failing call on the same thread.
 */
const char *ntscc_last_error(void);

/**
 * Static description of a status code.
 */
const char *ntscc_status_string(enum NtsccStatus status);

/**
 * Loads a checkpoint. On success `*out` receives a handle owned by the caller.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum NtsccStatus ntscc_model_load(const char *path, struct NtsccModelHandle **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `handle` must come from [`ntscc_model_load`] and not be used afterwards.
 */
void ntscc_model_free(struct NtsccModelHandle *handle);

/**
 * Selects AWGN (`rayleigh = 0`) or block Rayleigh fading (`rayleigh != 0`).
 *
 * # Safety
 * `handle` must be a live handle.
 */
enum NtsccStatus ntscc_model_set_channel(struct NtsccModelHandle *handle,
                                         int32_t rayleigh,
                                         size_t block_length);

/**
 * End-to-end transmission of one image. `height` and `width` must be
 * multiples of 16. Writes the reconstruction (same layout, clamped to
 * [0, 1]) and, if non-null, the channel bandwidth ratio and PSNR.
 *
 * # Safety
 * `pixels` and `out_pixels` must hold `height * width * 3` floats.
 */
enum NtsccStatus ntscc_transmit(const struct NtsccModelHandle *handle,
                                const float *pixels,
                                size_t height,
                                size_t width,
                                double lambda,
                                double eta,
                                double snr_db,
                                uint64_t seed,
                                float *out_pixels,
                                double *out_rho,
                                double *out_psnr_db);

/**
 * PSNR in dB of two images on [0, 1] (capped at 100 dB).
 *
 * # Safety
 * `a` and `b` must hold `height * width * 3` floats.
 */
enum NtsccStatus ntscc_psnr(const float *a,
                            const float *b,
                            size_t height,
                            size_t width,
                            double *out_db);

/**
 * BD-rate in percent of a test curve against an anchor (negative = saving).
 * `pchip != 0` selects piecewise-cubic interpolation instead of the cubic fit.
 *
 * # Safety
 * Each rate/PSNR array must hold the stated number of doubles.
 */
enum NtsccStatus ntscc_bd_rate(const double *anchor_rho,
                               const double *anchor_psnr,
                               size_t anchor_len,
                               const double *test_rho,
                               const double *test_psnr,
                               size_t test_len,
                               int32_t pchip,
                               double *out_percent);

/**
 * Channel-use index for a per-position budget `k` (piecewise quantizer).
 *
 * # Safety
 * `out` must be writable.
 */
enum NtsccStatus ntscc_quantize_rate(double k, uint32_t *out);

/**
 * Crate version as a static NUL-terminated string.
 */
const char *ntscc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NTSCC_H */
