#ifndef BIASOPT_H
#define BIASOPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BiasoptStatus {
  BIASOPT_STATUS_OK = 0,
  BIASOPT_STATUS_NULL_POINTER = 1,
  BIASOPT_STATUS_INVALID_STRING = 2,
  // Bad configuration, unreadable file or malformed JSON.
  BIASOPT_STATUS_CONFIG = 3,
  // Argument outside the domain of the operation.
  BIASOPT_STATUS_DOMAIN = 4,
  // A run failed after it started.
  BIASOPT_STATUS_RUNTIME = 5,
  BIASOPT_STATUS_OUT_OF_RANGE = 6,
  BIASOPT_STATUS_PANIC = 7,
} BiasoptStatus;

typedef enum BiasoptRegularizerKind {
  BIASOPT_REGULARIZER_KIND_ZERO = 0,
  BIASOPT_REGULARIZER_KIND_L1 = 1,
  BIASOPT_REGULARIZER_KIND_NONNEG_BOX = 2,
} BiasoptRegularizerKind;

typedef struct BiasoptBoundModel BiasoptBoundModel;

// A loaded experiment: problem, bound model and resolved algorithms.
typedef struct BiasoptExperiment BiasoptExperiment;

typedef struct BiasoptTrajectory BiasoptTrajectory;

// One row of a trajectory, matching the columns of the trajectory CSV.
typedef struct BiasoptRecord {
  uint64_t k;
  uint64_t eta;
  uint64_t batch;
  uint64_t samples_cum;
  uint64_t eta_cum;
  uint64_t eta_b_cum;
  double objective;
  double stationarity_sq;
  uint8_t saturated;
} BiasoptRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none failed.
// The pointer stays valid until the next failing call on the same thread.
const char *biasopt_last_error(void);

// Library version as a static NUL-terminated string.
const char *biasopt_version(void);

// Loads an experiment config file. Relative paths inside it resolve against its directory.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum BiasoptStatus biasopt_experiment_load(const char *path, struct BiasoptExperiment **out);

// Builds an experiment from config JSON. `base_dir` (may be null) anchors relative paths.
//
// # Safety
// `json` and, if non-null, `base_dir` must be NUL-terminated strings; `out` must be valid.
enum BiasoptStatus biasopt_experiment_from_json(const char *json,
                                                const char *base_dir,
                                                struct BiasoptExperiment **out);

// # Safety
// `exp` must come from this library and not be freed already; null is ignored.
void biasopt_experiment_free(struct BiasoptExperiment *exp);

// Number of configured algorithms, or 0 for a null handle.
//
// # Safety
// `exp` must be null or a live handle.
size_t biasopt_experiment_algorithm_count(const struct BiasoptExperiment *exp);

// Problem dimension, or 0 for a null handle.
//
// # Safety
// `exp` must be null or a live handle.
size_t biasopt_experiment_dimension(const struct BiasoptExperiment *exp);

// Runs replication `replication` of algorithm `algorithm` (0-based).
//
// # Safety
// `exp` must be a live handle and `out` a valid pointer.
enum BiasoptStatus biasopt_experiment_run(const struct BiasoptExperiment *exp,
                                          size_t algorithm,
                                          size_t replication,
                                          struct BiasoptTrajectory **out);

// Runs every algorithm and replication and writes the compare output to
// `out_dir`. `threads == 0` uses the default pool. Returns `Runtime` if any
// cell failed; the files are written regardless.
//
// # Safety
// `exp` must be a live handle and `out_dir` a NUL-terminated string.
enum BiasoptStatus biasopt_compare(const struct BiasoptExperiment *exp,
                                   const char *out_dir,
                                   size_t threads);

// # Safety
// `t` must come from this library and not be freed already; null is ignored.
void biasopt_trajectory_free(struct BiasoptTrajectory *t);

// Number of records, or 0 for a null handle.
//
// # Safety
// `t` must be null or a live handle.
size_t biasopt_trajectory_len(const struct BiasoptTrajectory *t);

// # Safety
// `t` must be a live handle and `out` a valid pointer.
enum BiasoptStatus biasopt_trajectory_record(const struct BiasoptTrajectory *t,
                                             size_t index,
                                             struct BiasoptRecord *out);

// Copies the final iterate into `buf` when `len` is large enough. Always
// stores the dimension in `dim`.
//
// # Safety
// `t` must be a live handle, `buf` valid for `len` writes, `dim` a valid pointer.
enum BiasoptStatus biasopt_trajectory_final_x(const struct BiasoptTrajectory *t,
                                              double *buf,
                                              size_t len,
                                              size_t *dim);

// Writes the trajectory CSV.
//
// # Safety
// `t` must be a live handle and `path` a NUL-terminated string.
enum BiasoptStatus biasopt_trajectory_write_csv(const struct BiasoptTrajectory *t,
                                                const char *path);

// Parses a bound model: either a bare model or a `fit` report.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum BiasoptStatus biasopt_bound_model_from_json(const char *json, struct BiasoptBoundModel **out);

// # Safety
// `m` must come from this library and not be freed already; null is ignored.
void biasopt_bound_model_free(struct BiasoptBoundModel *m);

// Evaluates `hb(eta)` and `hv(eta)`; either output may be null.
//
// # Safety
// `m` must be a live handle; non-null outputs must be valid.
enum BiasoptStatus biasopt_bound_model_eval(const struct BiasoptBoundModel *m,
                                            uint64_t eta,
                                            double *hb,
                                            double *hv);

// Smallest level in `[1, eta_max]` with `hb(eta) <= target`. `saturated` is
// set to 1 when no level qualifies and `eta_max` is returned.
//
// # Safety
// `m` must be a live handle; `eta` and `saturated` valid pointers.
enum BiasoptStatus biasopt_bound_model_invert_hb(const struct BiasoptBoundModel *m,
                                                 double target,
                                                 uint64_t eta_max,
                                                 uint64_t *eta,
                                                 uint8_t *saturated);

// Proximal step `argmin <g, y - x> + phi(y) + |y - x|^2 / (2 alpha)` into `out`.
//
// # Safety
// `x`, `g` and `out` must each be valid for `n` values.
enum BiasoptStatus biasopt_prox_step(const double *x,
                                     const double *g,
                                     size_t n,
                                     double alpha,
                                     enum BiasoptRegularizerKind kind,
                                     double lambda,
                                     double *out);

// Worst-case weights over the chi-square ball of radius `rho` around the
// uniform distribution. Writes `n` weights to `q` and the optimal value to `value`.
//
// # Safety
// `losses` and `q` must be valid for `n` values; `value` must be valid.
enum BiasoptStatus biasopt_chi2_solve(const double *losses,
                                      size_t n,
                                      double rho,
                                      double *q,
                                      double *value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BIASOPT_H */
