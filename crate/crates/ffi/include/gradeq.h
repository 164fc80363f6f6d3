#ifndef GRADEQ_H
#define GRADEQ_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum GradeqNoiseKind {
  GRADEQ_NOISE_KIND_ADDITIVE = 0,
  GRADEQ_NOISE_KIND_MULT_ADDITIVE = 1,
  GRADEQ_NOISE_KIND_OCCLUSION = 2,
} GradeqNoiseKind;

typedef enum GradeqStatus {
  GRADEQ_STATUS_OK = 0,
  GRADEQ_STATUS_NULL_POINTER = 1,
  GRADEQ_STATUS_INVALID_ARGUMENT = 2,
  GRADEQ_STATUS_IO = 3,
  /**
   * Malformed or corrupted checkpoint.
   */
  GRADEQ_STATUS_FORMAT = 4,
  GRADEQ_STATUS_SHAPE = 5,
  /**
   * Population with zero total or fewer than two members.
   */
  GRADEQ_STATUS_DEGENERATE = 6,
  GRADEQ_STATUS_NON_FINITE = 7,
  /**
   * A Rust panic was caught at the boundary.
   */
  GRADEQ_STATUS_INTERNAL = 8,
} GradeqStatus;

/**
 * Opaque handle to a loaded network.
 */
typedef struct GradeqModel GradeqModel;

/**
 * Noise on masked pixels. For occlusion `mu_delta` and `sigma_delta` are
 * ignored and `color` is used; otherwise `color` is ignored.
 */
typedef struct GradeqNoiseSpec {
  enum GradeqNoiseKind kind;
  double mu_delta;
  double sigma_delta;
  double mu_x;
  double sigma_x;
  double color;
} GradeqNoiseSpec;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failing call on this thread; empty after a success.
 * Valid until the next call on the same thread.
 */
const char *gradeq_last_error(void);

/**
 * Loads and verifies a checkpoint. On success `*out_model` owns a handle to release
 * with [`gradeq_model_free`].
 *
 * # Safety
 * `path` must be a nul-terminated string and `out_model` a valid pointer.
 */
enum GradeqStatus gradeq_model_load(const char *path, struct GradeqModel **out_model);

/**
 * # Safety
 * `model` must come from [`gradeq_model_load`] and not be used afterwards.
 * Null is ignored.
 */
void gradeq_model_free(struct GradeqModel *model);

/**
 * Writes `[C, H, W]` to `shape[0..3]` and the class count to `classes`.
 *
 * # Safety
 * `shape` must point to 3 writable `size_t`, `classes` to one.
 */
enum GradeqStatus gradeq_model_shape(const struct GradeqModel *model,
                                     size_t *shape,
                                     size_t *classes);

/**
 * Logit of class `target` for one image.
 *
 * # Safety
 * `x` must hold `len` doubles and `score` be writable.
 */
enum GradeqStatus gradeq_model_class_score(const struct GradeqModel *model,
                                           const double *x,
                                           size_t len,
                                           size_t target,
                                           double *score);

/**
 * Gradient of the `target` logit with respect to the image, `[C, H, W]`.
 *
 * # Safety
 * `x` and `grad` must each hold `len` doubles.
 */
enum GradeqStatus gradeq_model_saliency(const struct GradeqModel *model,
                                        const double *x,
                                        size_t len,
                                        size_t target,
                                        double *grad);

/**
 * Gini coefficient of a non-negative population.
 *
 * # Safety
 * `values` must hold `len` doubles.
 */
enum GradeqStatus gradeq_gini(const double *values, size_t len, double *result);

/**
 * Gini of the `block x block` sums of a row-major `h x w` map.
 *
 * # Safety
 * `map` must hold `h * w` doubles.
 */
enum GradeqStatus gradeq_regional_gini(const double *map,
                                       size_t h,
                                       size_t w,
                                       size_t block,
                                       double *result);

/**
 * Predicted variance of the class-score deviation of the linear score
 * `w · x` when the entries `coords` are perturbed as `spec` describes.
 *
 * # Safety
 * `w` must hold `len` doubles and `coords` `k` indices.
 */
enum GradeqStatus gradeq_predicted_deviation(const double *w,
                                             size_t len,
                                             const size_t *coords,
                                             size_t k,
                                             const struct GradeqNoiseSpec *spec,
                                             double *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRADEQ_H */
