#ifndef WRAPACC_H
#define WRAPACC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes.
 */
typedef enum WaStatus {
  WA_STATUS_OK = 0,
  WA_STATUS_NULL_POINTER = 1,
  WA_STATUS_INVALID_ARGUMENT = 2,
  WA_STATUS_OUT_OF_RANGE = 3,
  WA_STATUS_SHAPE = 4,
  WA_STATUS_UNSUPPORTED = 5,
  WA_STATUS_IO = 6,
  WA_STATUS_FORMAT = 7,
  WA_STATUS_PANIC = 8,
} WaStatus;

/**
 * A loaded model.
 */
typedef struct WaModel WaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *wa_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t wa_last_error_message(char *buf, size_t len);

/**
 * Two's-complement wrap of `z` into `bits` bits.
 *
 * # Safety
 * `result` must be a valid pointer.
 */
enum WaStatus wa_wrap(int64_t z, uint32_t bits, int64_t *result);

/**
 * Dot product of two `n`-vectors accumulated in a wrapping `bits`-bit register.
 *
 * # Safety
 * `x` and `w` must point to `n` values; `result` must be valid.
 */
enum WaStatus wa_wrapped_dot(const int32_t *x,
                             const int32_t *w,
                             size_t n,
                             uint32_t bits,
                             int64_t *result);

/**
 * Smooth-modulo activation with transition slope `k` (`INFINITY` for the
 * plain modulo) on a `bits`-bit accumulator.
 *
 * # Safety
 * `result` must be a valid pointer.
 */
enum WaStatus wa_cyclic_apply(double z, uint32_t bits, double k, double *result);

/**
 * Carries produced when the `n` values are summed in a `bits`-bit register
 * with every carry folded back in.
 *
 * # Safety
 * `v` must point to `n` values; `carries` and `residue` must be valid.
 */
enum WaStatus wa_carry_count(const int64_t *v,
                             size_t n,
                             uint32_t bits,
                             uint64_t *carries,
                             uint64_t *residue);

/**
 * `out[m x n] = a[m x k] * b[k x n]` under an accumulator mode string such
 * as `exact32`, `wrapped:8` or `packed_isolated:8:64`.
 *
 * # Safety
 * `a`, `b` and `result` must point to `m*k`, `k*n` and `m*n` values.
 */
enum WaStatus wa_gemm(const int32_t *a,
                      const int32_t *b,
                      size_t m,
                      size_t k,
                      size_t n,
                      const char *mode,
                      int64_t *result);

/**
 * Loads a model manifest (file or directory) into a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `model` must be valid.
 */
enum WaStatus wa_model_load(const char *path, struct WaModel **model);

/**
 * Releases a handle from [`wa_model_load`]; null is ignored.
 *
 * # Safety
 * `model` must be null or a live handle, not used afterwards.
 */
void wa_model_free(struct WaModel *model);

/**
 * Input features and output classes of a model.
 *
 * # Safety
 * `model` must be a live handle; the out-pointers must be valid.
 */
enum WaStatus wa_model_dims(const struct WaModel *model, size_t *inputs, size_t *outputs);

/**
 * Runs `batch` rows of `input` through the model under `mode`, writing
 * `batch * outputs` logits.
 *
 * # Safety
 * `model` must be a live handle; `input` and `logits` must hold
 * `batch * inputs` and `batch * outputs` values.
 */
enum WaStatus wa_model_infer(const struct WaModel *model,
                             const double *input,
                             size_t batch,
                             const char *mode,
                             double *logits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WRAPACC_H */
