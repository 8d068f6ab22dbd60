#ifndef FLMM_H
#define FLMM_H

#include <stddef.h>
#include <stdint.h>

typedef enum FlmmDesign {
  FLMM_DESIGN_FRI = 0,
  FLMM_DESIGN_CROSSED = 1,
} FlmmDesign;

typedef enum FlmmPredict {
  FLMM_PREDICT_EBLUP = 0,
  FLMM_PREDICT_FAMM = 1,
  FLMM_PREDICT_BOTH = 2,
} FlmmPredict;

typedef enum FlmmStatus {
  FLMM_STATUS_OK = 0,
  FLMM_STATUS_NULL_POINTER = 1,
  FLMM_STATUS_INVALID_ARGUMENT = 2,
  FLMM_STATUS_IO = 3,
  FLMM_STATUS_PARSE = 4,
  FLMM_STATUS_DEGENERATE_DESIGN = 5,
  FLMM_STATUS_NUMERICAL = 6,
  FLMM_STATUS_NO_COMPONENTS = 7,
  FLMM_STATUS_BUFFER_TOO_SMALL = 8,
  FLMM_STATUS_PANIC = 9,
} FlmmStatus;

typedef enum FlmmProcess {
  FLMM_PROCESS_B = 0,
  FLMM_PROCESS_C = 1,
  FLMM_PROCESS_E = 2,
} FlmmProcess;

/*
 A validated set of curves.
 */
typedef struct FlmmCurves FlmmCurves;

/*
 A fitted model.
 */
typedef struct FlmmFit FlmmFit;

/*
 Fit settings. Obtain defaults from `flmm_options_default`.
 */
typedef struct FlmmOptions {
  enum FlmmDesign design;
  uintptr_t k_mean;
  uintptr_t k_cov;
  uintptr_t grid_d;
  double var_level;
  /*
   Fixed component counts (B, C, E); used when `fixed_components` is nonzero.
   */
  uintptr_t n_components[3];
  int32_t fixed_components;
  enum FlmmPredict predict;
} FlmmOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer stays
 valid until the next failing call on the same thread.
 */
const char *flmm_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *flmm_version(void);

struct FlmmOptions flmm_options_default(void);

/*
 Loads curves from a CSV file with the default column layout
 (`curve_id,g1,g2,rep,t,y`).

 # Safety
 `path` must be a NUL-terminated string; `out` must be writable.
 */
enum FlmmStatus flmm_curves_from_csv(const char *path, struct FlmmCurves **out);

/*
 Builds curves from `n` observations. `g1` and `g2` are 0-based level
 codes. Rows sharing `(g1, g2, rep)` form one
 curve; `g2` may be NULL for the single-intercept design.

 # Safety
 `g1`, `rep`, `t`, `y` (and `g2` unless NULL) must point to `n` values;
 `out` must be writable.
 */
enum FlmmStatus flmm_curves_from_arrays(uintptr_t n,
                                        const uint32_t *g1,
                                        const uint32_t *g2,
                                        const uint32_t *rep,
                                        const double *t,
                                        const double *y,
                                        struct FlmmCurves **out);

/*
 # Safety
 `curves` must come from an `flmm_curves_*` constructor, or be NULL.
 */
void flmm_curves_free(struct FlmmCurves *curves);

/*
 # Safety
 `curves` must be a live handle; `n_curves` and `n_points` may be NULL.
 */
enum FlmmStatus flmm_curves_size(const struct FlmmCurves *curves,
                                 uintptr_t *n_curves,
                                 uintptr_t *n_points);

/*
 Runs mean, covariance, eigen and prediction steps once. `opts` may be NULL
 for defaults.

 # Safety
 `curves` must be a live handle; `opts` NULL or valid; `out` writable.
 */
enum FlmmStatus flmm_fit(const struct FlmmCurves *curves,
                         const struct FlmmOptions *opts,
                         struct FlmmFit **out);

/*
 # Safety
 `fit` must come from `flmm_fit`, or be NULL.
 */
void flmm_fit_free(struct FlmmFit *fit);

/*
 Estimated error variance.

 # Safety
 `fit` must be a live handle; `out` writable.
 */
enum FlmmStatus flmm_fit_sigma2(const struct FlmmFit *fit, double *out);

/*
 Number of retained components of `process` (0 when absent).

 # Safety
 `fit` must be a live handle; `out` writable.
 */
enum FlmmStatus flmm_fit_n_components(const struct FlmmFit *fit,
                                      enum FlmmProcess process,
                                      uintptr_t *out);

/*
 Copies the evaluation grid. `written` receives the required length even
 when the buffer is too small.

 # Safety
 `fit` must be a live handle; `out` must hold `len` values; `written` may be NULL.
 */
enum FlmmStatus flmm_fit_grid(const struct FlmmFit *fit,
                              double *out,
                              uintptr_t len,
                              uintptr_t *written);

/*
 Copies the retained eigenvalues of `process`.

 # Safety
 As for `flmm_fit_grid`.
 */
enum FlmmStatus flmm_fit_eigenvalues(const struct FlmmFit *fit,
                                     enum FlmmProcess process,
                                     double *out,
                                     uintptr_t len,
                                     uintptr_t *written);

/*
 Copies eigenfunction `k` (0-based) of `process` on the grid.

 # Safety
 As for `flmm_fit_grid`.
 */
enum FlmmStatus flmm_fit_eigenfunction(const struct FlmmFit *fit,
                                       enum FlmmProcess process,
                                       uintptr_t k,
                                       double *out,
                                       uintptr_t len,
                                       uintptr_t *written);

/*
 Copies fitted values at every observation, in input order of the curve set.

 # Safety
 As for `flmm_fit_grid`.
 */
enum FlmmStatus flmm_fit_fitted(const struct FlmmFit *fit,
                                double *out,
                                uintptr_t len,
                                uintptr_t *written);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLMM_H */
