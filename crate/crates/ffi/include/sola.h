#ifndef SOLA_H
#define SOLA_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SolaStatus {
  SOLA_STATUS_OK = 0,
  SOLA_STATUS_NULL_POINTER = 1,
  SOLA_STATUS_INVALID_UTF8 = 2,
  SOLA_STATUS_INVALID_CONFIG = 3,
  SOLA_STATUS_SHAPE_MISMATCH = 4,
  SOLA_STATUS_INVALID_ARGUMENT = 5,
  SOLA_STATUS_NUMERICAL = 6,
  SOLA_STATUS_IO = 7,
  SOLA_STATUS_PANIC = 8,
} SolaStatus;

/**
 * Opaque model handle.
 */
typedef struct SolaModel SolaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. Valid until the next call.
 */
const char *sola_last_error_message(void);

/**
 * Builds a seeded model from a preset name (`sola_t`, `sola_s`, `sola_b`, `micro`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SolaStatus sola_model_from_preset(const char *name, uint64_t seed, struct SolaModel **out);

/**
 * Builds a seeded model from a JSON config document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a writable pointer.
 */
enum SolaStatus sola_model_from_json(const char *json, uint64_t seed, struct SolaModel **out);

/**
 * # Safety
 * `model` must come from a constructor above and not be freed twice. Null is ignored.
 */
void sola_model_free(struct SolaModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SolaStatus sola_model_param_count(const struct SolaModel *model, size_t *out);

/**
 * Length of the pooled feature returned by [`sola_model_forward`].
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SolaStatus sola_model_output_dim(const struct SolaModel *model, size_t *out);

/**
 * Analytic FLOPs for a square input of side `resolution`.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SolaStatus sola_model_flops(const struct SolaModel *model, size_t resolution, uint64_t *out);

/**
 * Forward pass on a `resolution × resolution × 3` row-major image; writes the pooled feature.
 *
 * # Safety
 * `image` must hold `resolution * resolution * 3` doubles and `out` must hold `out_len`.
 */
enum SolaStatus sola_model_forward(const struct SolaModel *model,
                                   const double *image,
                                   size_t resolution,
                                   double *out,
                                   size_t out_len);

/**
 * Bidirectional decay-weighted average over `n` tokens of width `d`.
 *
 * # Safety
 * `k`, `v` and `out` must hold `n * d` doubles; `w` and `u` must hold `d`.
 */
enum SolaStatus sola_wkv_scan(const double *k,
                              const double *v,
                              const double *w,
                              const double *u,
                              size_t n,
                              size_t d,
                              double *out);

/**
 * Effective radius of `depth` stacked exponential kernels of rate `w` at threshold `epsilon`.
 *
 * # Safety
 * `out` must be writable.
 */
enum SolaStatus sola_effective_range(double w, double epsilon, size_t depth, size_t *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SOLA_H */
