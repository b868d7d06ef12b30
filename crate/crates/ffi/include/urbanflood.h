#ifndef URBANFLOOD_H
#define URBANFLOOD_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 4 match the command-line exit codes.
 */
typedef enum UfStatus {
  UF_STATUS_OK = 0,
  /**
   * Null pointer, bad length or non-UTF-8 string.
   */
  UF_STATUS_INVALID_ARGUMENT = 1,
  UF_STATUS_CONFIG = 2,
  UF_STATUS_DATA = 3,
  UF_STATUS_NUMERICAL = 4,
  /**
   * A Rust panic was caught at the boundary.
   */
  UF_STATUS_INTERNAL = 5,
} UfStatus;

/**
 * Loaded model (opaque).
 */
typedef struct UfModel UfModel;

/**
 * The four accuracy scores.
 */
typedef struct UfScores {
  double mae;
  double rmse;
  double nse;
  double kge;
} UfScores;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len - 1` bytes). Returns the full message
 * length in bytes; pass a null `buf` to query it.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t uf_last_error(char *buf, size_t len);

/**
 * Library version as a static NUL-terminated string.
 */
const char *uf_version(void);

/**
 * Loads a checkpoint written by `urbanflood train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum UfStatus uf_model_load(const char *path, struct UfModel **out);

/**
 * Frees a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`uf_model_load`] and not be used afterwards.
 */
void uf_model_free(struct UfModel *model);

/**
 * Input geometry the model expects.
 *
 * # Safety
 * `model` must be a live handle; the out pointers must be writable.
 */
enum UfStatus uf_model_shape(const struct UfModel *model,
                             size_t *channels,
                             size_t *height,
                             size_t *width);

/**
 * Number of stored parameter values, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t uf_model_param_count(const struct UfModel *model);

/**
 * Predicts one depth map. `x` holds `C*H*W` planar feature values, `rain`
 * the model-scaled rainfall sequence, and `out` receives `H*W` values.
 *
 * # Safety
 * Pointers must reference buffers of the stated lengths.
 */
enum UfStatus uf_model_predict(const struct UfModel *model,
                               const double *x,
                               size_t x_len,
                               const double *rain,
                               size_t rain_len,
                               double *out,
                               size_t out_len);

/**
 * MAE, RMSE, NSE and KGE of `sim` against `obs`.
 *
 * # Safety
 * `obs` and `sim` must each hold `n` values; `out` must be writable.
 */
enum UfStatus uf_scores(const double *obs, const double *sim, size_t n, struct UfScores *out);

/**
 * Generates a synthetic dataset with default settings into `out_dir`.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string.
 */
enum UfStatus uf_synth(uint64_t seed,
                       size_t rows,
                       size_t cols,
                       bool write_series,
                       const char *out_dir);

/**
 * Derives the 14 feature rasters with default terrain settings and writes
 * them as `<ID>.asc` into `out_dir`.
 *
 * # Safety
 * All paths must be NUL-terminated strings.
 */
enum UfStatus uf_derive_features(const char *dem,
                                 const char *land_use,
                                 const char *pipes,
                                 const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* URBANFLOOD_H */
