#ifndef CBS_H
#define CBS_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum {
  CBS_STATUS_OK = 0,
  CBS_STATUS_NULL_POINTER = 1,
  CBS_STATUS_INVALID_ARGUMENT = 2,
  CBS_STATUS_INVALID_UTF8 = 3,
  CBS_STATUS_PARSE = 4,
  CBS_STATUS_DIMENSION_MISMATCH = 5,
  CBS_STATUS_NON_FINITE = 6,
  CBS_STATUS_NOT_NORMALIZED = 7,
  CBS_STATUS_BUDGET = 8,
  CBS_STATUS_IO = 9,
  CBS_STATUS_BUFFER_TOO_SMALL = 10,
  CBS_STATUS_INTERNAL = 11,
} CbsStatus;

/**
 * Feature matrix with ids `0..rows`.
 */
typedef struct CbsFeatureStore CbsFeatureStore;

/**
 * Ids picked by a selection call, in selection order.
 */
typedef struct CbsSelection CbsSelection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. Owned by the
 * library; valid until the next failing call on the same thread.
 */
const char *cbs_last_error_message(void);

/**
 * Library version, a static string.
 */
const char *cbs_version(void);

/**
 * Builds a store from a row-major `rows × dim` matrix. Ids are row indices.
 *
 * # Safety
 * `data` must point to `rows * dim` readable doubles; `out` must be writable.
 */
CbsStatus cbs_store_from_matrix(const double *data, size_t rows, size_t dim, CbsFeatureStore **out);

/**
 * Loads a features CSV (`id[,label],f0,...`).
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
CbsStatus cbs_store_load_csv(const char *path, CbsFeatureStore **out);

/**
 * Writes a new, L2-normalized copy of `store` to `out`.
 *
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
CbsStatus cbs_store_normalize(const CbsFeatureStore *store, CbsFeatureStore **out);

/**
 * Number of rows, or 0 for NULL.
 *
 * # Safety
 * `store` must be NULL or a live handle.
 */
size_t cbs_store_len(const CbsFeatureStore *store);

/**
 * Feature dimension, or 0 for NULL.
 *
 * # Safety
 * `store` must be NULL or a live handle.
 */
size_t cbs_store_dim(const CbsFeatureStore *store);

/**
 * # Safety
 * `store` must be NULL or a handle not yet freed.
 */
void cbs_store_free(CbsFeatureStore *store);

/**
 * Class-balanced selection of `budget` ids from a normalized store,
 * clustering into `num_classes` groups.
 *
 * # Safety
 * `store` must be a live handle; `out` must be writable.
 */
CbsStatus cbs_select(const CbsFeatureStore *store,
                     size_t num_classes,
                     size_t budget,
                     uint64_t seed,
                     CbsSelection **out);

/**
 * Number of selected ids, or 0 for NULL.
 *
 * # Safety
 * `selection` must be NULL or a live handle.
 */
size_t cbs_selection_len(const CbsSelection *selection);

/**
 * Copies the selected ids into `ids`, which holds `capacity` entries.
 *
 * # Safety
 * `selection` must be a live handle; `ids` must point to `capacity`
 * writable `uint64_t`.
 */
CbsStatus cbs_selection_ids(const CbsSelection *selection, uint64_t *ids, size_t capacity);

/**
 * # Safety
 * `selection` must be NULL or a handle not yet freed.
 */
void cbs_selection_free(CbsSelection *selection);

/**
 * `KL(p || q)` for diagonal Gaussians given as mean and variance arrays of
 * length `dim`. Variances must be positive.
 *
 * # Safety
 * All four arrays must hold `dim` readable doubles; `out` must be writable.
 */
CbsStatus cbs_kl_divergence(const double *p_mean,
                            const double *p_var,
                            const double *q_mean,
                            const double *q_var,
                            size_t dim,
                            double *out);

/**
 * Runs the multi-session protocol and writes the report JSON to `out_json`
 * (free with [`cbs_string_free`]). `config_json` may be NULL for defaults.
 * `strategy` is one of `random`, `balanced_random`, `entropy`, `margin`,
 * `coreset`, `cbs`. The store must carry labels.
 *
 * # Safety
 * String arguments must be NUL-terminated; `store` must be a live handle;
 * `out_json` must be writable.
 */
CbsStatus cbs_simulate_json(const char *plan_json,
                            const CbsFeatureStore *store,
                            const char *strategy,
                            const char *config_json,
                            char **out_json);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void cbs_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CBS_H */
