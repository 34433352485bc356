#ifndef RCHC_H
#define RCHC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum RchcStatus {
  RCHC_STATUS_OK = 0,
  RCHC_STATUS_NULL_POINTER = 1,
  RCHC_STATUS_INVALID_ARGUMENT = 2,
  RCHC_STATUS_CONTRACT = 3,
  RCHC_STATUS_CONFIG = 4,
  RCHC_STATUS_PARSE = 5,
  RCHC_STATUS_IO = 6,
  RCHC_STATUS_NUMERIC = 7,
  RCHC_STATUS_CLUSTERING = 8,
  RCHC_STATUS_STATISTICS = 9,
  RCHC_STATUS_PANIC = 10,
} RchcStatus;

/**
 * Inputs with optional labels.
 */
typedef struct RchcDataset RchcDataset;

/**
 * A loaded model checkpoint.
 */
typedef struct RchcModel RchcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator, so a caller can size a buffer with `len = 0`.
 *
 * # Safety
 * `buf` must be null or valid for `len` writable bytes.
 */
size_t rchc_last_error_message(char *buf, size_t len);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RchcStatus rchc_model_load(const char *path, struct RchcModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`rchc_model_load`] not yet freed.
 */
void rchc_model_free(struct RchcModel *model);

/**
 * Input width, class count and embedding width of a model. Null out
 * pointers are skipped.
 *
 * # Safety
 * `model` must be null or a live handle; each out pointer null or writable.
 */
enum RchcStatus rchc_model_dims(const struct RchcModel *model,
                                size_t *in_dim,
                                size_t *n_classes,
                                size_t *embed_dim);

/**
 * Loads a CSV of feature rows, with a trailing integer label when
 * `has_labels` is nonzero.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum RchcStatus rchc_dataset_load_csv(const char *path, bool has_labels, struct RchcDataset **out);

/**
 * Builds a dataset from `n * dim` row-major values; `labels` may be null.
 *
 * # Safety
 * `values` must hold `n * dim` doubles, `labels` null or `n` entries.
 */
enum RchcStatus rchc_dataset_from_rows(const double *values,
                                       size_t n,
                                       size_t dim,
                                       const size_t *labels,
                                       struct RchcDataset **out);

/**
 * # Safety
 * `dataset` must be null or a live handle not yet freed.
 */
void rchc_dataset_free(struct RchcDataset *dataset);

/**
 * Number of rows; 0 for a null handle.
 *
 * # Safety
 * `dataset` must be null or a live handle.
 */
size_t rchc_dataset_len(const struct RchcDataset *dataset);

/**
 * Predicted class per row into `out[len]`, `len` = dataset length.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` entries.
 */
enum RchcStatus rchc_predict(const struct RchcModel *model,
                             const struct RchcDataset *dataset,
                             size_t *out,
                             size_t len);

/**
 * Row-major class probabilities into `out[len]`, `len` = rows * classes.
 *
 * # Safety
 * Handles must be live; `out` must hold `len` doubles.
 */
enum RchcStatus rchc_predict_probs(const struct RchcModel *model,
                                   const struct RchcDataset *dataset,
                                   double *out,
                                   size_t len);

/**
 * Overall accuracy and mean per-class accuracy on a labeled dataset.
 *
 * # Safety
 * Handles must be live; out pointers writable.
 */
enum RchcStatus rchc_evaluate(const struct RchcModel *model,
                              const struct RchcDataset *dataset,
                              double *accuracy,
                              double *mean_class_accuracy);

/**
 * Centroid pseudo-labels, uncertainty ratios and conflict flags (1 when the
 * pseudo-label disagrees with the prediction and the ratio is below
 * `r_th`). Each buffer holds one entry per row.
 *
 * # Safety
 * Handles must be live; every buffer must hold `len` entries.
 */
enum RchcStatus rchc_pseudo_labels(const struct RchcModel *model,
                                   const struct RchcDataset *dataset,
                                   double r_th,
                                   size_t *labels,
                                   double *ratios,
                                   uint8_t *flags,
                                   size_t len);

/**
 * `1 - u.v / (|u||v| + 1e-12)`.
 *
 * # Safety
 * `u` and `v` must each hold `len` doubles; `out` must be writable.
 */
enum RchcStatus rchc_cosine_distance(const double *u, const double *v, size_t len, double *out);

/**
 * Library version as a static NUL-terminated string.
 */
const char *rchc_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RCHC_H */
