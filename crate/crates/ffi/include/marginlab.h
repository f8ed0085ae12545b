#ifndef MARGINLAB_H
#define MARGINLAB_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MlStatus {
  ML_STATUS_OK = 0,
  ML_STATUS_NULL_POINTER = 1,
  ML_STATUS_INVALID_ARGUMENT = 2,
  ML_STATUS_IO = 3,
  ML_STATUS_FORMAT = 4,
  ML_STATUS_DIMENSION_MISMATCH = 5,
  /**
   * The call succeeded but no valid margin exists.
   */
  ML_STATUS_NO_MARGIN = 6,
  ML_STATUS_BUFFER_TOO_SMALL = 7,
  ML_STATUS_PANIC = 8,
  ML_STATUS_INTERNAL = 9,
} MlStatus;

typedef enum MlRestartPolicy {
  ML_RESTART_POLICY_NONE = 0,
  ML_RESTART_POLICY_BISECTION_SEED = 1,
} MlRestartPolicy;

typedef enum MlPairStatus {
  ML_PAIR_STATUS_VALID = 0,
  ML_PAIR_STATUS_INVALID_RESIDUAL = 1,
  ML_PAIR_STATUS_NON_FINITE = 2,
  ML_PAIR_STATUS_DOMINATED = 3,
} MlPairStatus;

/**
 * Opaque labeled dataset.
 */
typedef struct MlDataset MlDataset;

/**
 * Opaque result of [`ml_margin`].
 */
typedef struct MlMarginResult MlMarginResult;

/**
 * Opaque trained network.
 */
typedef struct MlModel MlModel;

/**
 * Mirror of the solver configuration; fill it with
 * [`ml_solver_config_default`] and adjust.
 */
typedef struct MlSolverConfig {
  double validity_threshold;
  size_t inner_max_iters;
  size_t outer_max_iters;
  double penalty_init;
  double penalty_growth;
  double multiplier_init;
  double convergence_tol;
  double feasibility_tol;
  enum MlRestartPolicy restart_policy;
  double sandwich_tol;
} MlSolverConfig;

typedef struct MlPairInfo {
  size_t j;
  double distance;
  double residual;
  enum MlPairStatus status;
  size_t evaluations;
  /**
   * Class beating both `i` and `j` at the solution, or -1.
   */
  int64_t dominated_by;
  bool restarted;
} MlPairInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (always NUL
 * terminated when `len > 0`) and returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t ml_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ml_version(void);

/**
 * Loads a `.mlpm` checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MlStatus ml_model_load(const char *path, struct MlModel **out);

/**
 * Builds a model from row-major weights: `w1` is `hidden x input`, `w2`
 * is `classes x hidden`.
 *
 * # Safety
 * Each array must hold the number of elements its shape implies.
 */
enum MlStatus ml_model_from_parts(size_t input_dim,
                                  size_t hidden_width,
                                  size_t num_classes,
                                  const double *w1,
                                  const double *b1,
                                  const double *w2,
                                  const double *b2,
                                  struct MlModel **out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void ml_model_free(struct MlModel *model);

/**
 * # Safety
 * `model` must be a live handle; the out pointers may be null.
 */
enum MlStatus ml_model_dims(const struct MlModel *model,
                            size_t *input_dim,
                            size_t *hidden_width,
                            size_t *num_classes);

/**
 * Writes the logits of `x` into `out`.
 *
 * # Safety
 * `x` must hold `x_len` values and `out` `out_len` writable values.
 */
enum MlStatus ml_model_logits(const struct MlModel *model,
                              const double *x,
                              size_t x_len,
                              double *out,
                              size_t out_len);

/**
 * # Safety
 * `x` must hold `x_len` values; `class_out` must be writable.
 */
enum MlStatus ml_model_predict(const struct MlModel *model,
                               const double *x,
                               size_t x_len,
                               size_t *class_out);

/**
 * Gradient of `f(x)[i] - f(x)[j]` with respect to `x`.
 *
 * # Safety
 * `x` must hold `x_len` values and `out` `out_len` writable values.
 */
enum MlStatus ml_model_input_gradient(const struct MlModel *model,
                                      const double *x,
                                      size_t x_len,
                                      size_t i,
                                      size_t j,
                                      double *out,
                                      size_t out_len);

/**
 * # Safety
 * `out` must be writable.
 */
enum MlStatus ml_solver_config_default(struct MlSolverConfig *out);

/**
 * Margin of `x` under `model`. `reference` (a differently classified
 * point of the same length, or null) enables the bisection bound and
 * restart; `config` may be null for the defaults. Returns
 * `ML_STATUS_NO_MARGIN` with a valid `*out` when no pair converged.
 *
 * # Safety
 * `x` and `reference` must hold `len` values; `out` must be writable.
 */
enum MlStatus ml_margin(const struct MlModel *model,
                        const double *x,
                        const double *reference,
                        size_t len,
                        const struct MlSolverConfig *config,
                        struct MlMarginResult **out);

/**
 * # Safety
 * `result` must come from [`ml_margin`] and not be used afterwards.
 */
void ml_margin_result_free(struct MlMarginResult *result);

/**
 * Margin, winning class `j*` and predicted class `i`. Out pointers may be
 * null.
 *
 * # Safety
 * `result` must be a live handle.
 */
enum MlStatus ml_margin_result_value(const struct MlMarginResult *result,
                                     double *margin,
                                     size_t *j_star,
                                     size_t *i);

/**
 * Bisection bound toward the reference, or `NaN` without one.
 *
 * # Safety
 * `result` must be a live handle.
 */
double ml_margin_result_upper_bound(const struct MlMarginResult *result);

/**
 * Copies the nearest boundary point into `out`.
 *
 * # Safety
 * `out` must hold `out_len` writable values.
 */
enum MlStatus ml_margin_result_point(const struct MlMarginResult *result,
                                     double *out,
                                     size_t out_len);

/**
 * Number of class pairs attempted.
 *
 * # Safety
 * `result` must be a live handle or null.
 */
size_t ml_margin_result_pair_count(const struct MlMarginResult *result);

/**
 * # Safety
 * `result` must be a live handle; `out` must be writable.
 */
enum MlStatus ml_margin_result_pair(const struct MlMarginResult *result,
                                    size_t index,
                                    struct MlPairInfo *out);

/**
 * Distance from `x` to the first class change on the segment toward
 * `other`.
 *
 * # Safety
 * `x` and `other` must hold `len` values; `distance` must be writable.
 */
enum MlStatus ml_bisection_upper_bound(const struct MlModel *model,
                                       const double *x,
                                       const double *other,
                                       size_t len,
                                       double *distance);

/**
 * Loads an IDX image/label file pair as a training split.
 *
 * # Safety
 * Both paths must be NUL-terminated strings; `out` must be writable.
 */
enum MlStatus ml_dataset_load_idx(const char *images, const char *labels, struct MlDataset **out);

/**
 * Loads a `.mlds` dataset file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MlStatus ml_dataset_load(const char *path, struct MlDataset **out);

/**
 * # Safety
 * `ds` must come from this library and not be used afterwards.
 */
void ml_dataset_free(struct MlDataset *ds);

/**
 * # Safety
 * `ds` must be a live handle; out pointers may be null.
 */
enum MlStatus ml_dataset_dims(const struct MlDataset *ds,
                              size_t *len,
                              size_t *dim,
                              size_t *num_classes);

/**
 * Copies row `index` of the dataset, widened to double precision.
 *
 * # Safety
 * `out` must hold `out_len` writable values.
 */
enum MlStatus ml_dataset_row(const struct MlDataset *ds, size_t index, double *out, size_t out_len);

/**
 * Distance from each sample in `ids` to the nearest sample with a
 * different effective label.
 *
 * # Safety
 * `ids` must hold `n` values and `distances` `n` writable values.
 */
enum MlStatus ml_max_margin(const struct MlDataset *ds,
                            const uint64_t *ids,
                            size_t n,
                            double *distances);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MARGINLAB_H */
