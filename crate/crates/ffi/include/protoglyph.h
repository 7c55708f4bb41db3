#ifndef PROTOGLYPH_H
#define PROTOGLYPH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PgStatus {
  PG_STATUS_OK = 0,
  PG_STATUS_NULL_ARGUMENT = 1,
  PG_STATUS_INVALID_ARGUMENT = 2,
  PG_STATUS_CONFIG = 3,
  PG_STATUS_DATA = 4,
  PG_STATUS_SPLIT = 5,
  PG_STATUS_CAPACITY = 6,
  PG_STATUS_MISSING_FILE = 7,
  PG_STATUS_CHECKPOINT = 8,
  PG_STATUS_NUMERIC_FAULT = 9,
  PG_STATUS_VERIFIER = 10,
  PG_STATUS_IO = 11,
  PG_STATUS_PANIC = 12,
} PgStatus;

/**
 * Opaque graph dataset.
 */
typedef struct PgDataset PgDataset;

/**
 * Opaque trained model: architecture plus parameters.
 */
typedef struct PgModel PgModel;

typedef struct PgEvalSummary {
  size_t n_episodes;
  double mean_accuracy;
  double std;
  double ci95_halfwidth;
} PgEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *pg_version(void);

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next failing call on the same thread.
 */
const char *pg_last_error(void);

void pg_clear_error(void);

/**
 * Generates the synthetic triangle-count dataset.
 *
 * # Safety
 * `out` must be valid for one pointer write.
 */
enum PgStatus pg_dataset_generate_triangles(size_t n_classes,
                                            size_t samples_per_class,
                                            uint64_t seed,
                                            struct PgDataset **out);

/**
 * Loads `<root>/<name>_*.txt` in TU format.
 *
 * # Safety
 * `root` and `name` must be NUL-terminated strings; `out` must be valid
 * for one pointer write.
 */
enum PgStatus pg_dataset_load_tu(const char *root, const char *name, struct PgDataset **out);

/**
 * # Safety
 * `dataset` must come from this library or be null; `out` must be writable.
 */
enum PgStatus pg_dataset_len(const struct PgDataset *dataset, size_t *out);

/**
 * # Safety
 * As [`pg_dataset_len`].
 */
enum PgStatus pg_dataset_n_classes(const struct PgDataset *dataset, size_t *out);

/**
 * Width of the node feature rows.
 *
 * # Safety
 * As [`pg_dataset_len`].
 */
enum PgStatus pg_dataset_feature_dim(const struct PgDataset *dataset, size_t *out);

/**
 * Original class label of graph `index`.
 *
 * # Safety
 * As [`pg_dataset_len`].
 */
enum PgStatus pg_dataset_graph_label(const struct PgDataset *dataset, size_t index, int64_t *out);

/**
 * # Safety
 * `dataset` must come from this library and not be used afterwards.
 */
void pg_dataset_free(struct PgDataset *dataset);

/**
 * Loads a training checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be valid for one
 * pointer write.
 */
enum PgStatus pg_model_load(const char *path, struct PgModel **out);

/**
 * Width of one graph embedding.
 *
 * # Safety
 * `model` must come from this library; `out` must be writable.
 */
enum PgStatus pg_model_output_dim(const struct PgModel *model, size_t *out);

/**
 * Node feature width the model expects.
 *
 * # Safety
 * As [`pg_model_output_dim`].
 */
enum PgStatus pg_model_input_dim(const struct PgModel *model, size_t *out);

/**
 * Writes unconditioned embeddings of `n` graphs, row-major, into `out`,
 * which must hold at least `n · output_dim` values.
 *
 * # Safety
 * Handles must come from this library; `indices` must point to `n`
 * values and `out` to `out_len` writable values.
 */
enum PgStatus pg_model_embed(const struct PgModel *model,
                             const struct PgDataset *dataset,
                             const size_t *indices,
                             size_t n,
                             double *out,
                             size_t out_len);

/**
 * Accuracy over `n_episodes` N-way K-shot episodes drawn from the listed
 * classes (original labels).
 *
 * # Safety
 * Handles must come from this library; `classes` must point to
 * `n_classes` values; `out` must be writable.
 */
enum PgStatus pg_model_evaluate(const struct PgModel *model,
                                const struct PgDataset *dataset,
                                const int64_t *classes,
                                size_t n_classes,
                                size_t n_way,
                                size_t k_shot,
                                size_t n_query,
                                size_t n_episodes,
                                uint64_t seed,
                                struct PgEvalSummary *out);

/**
 * # Safety
 * `model` must come from this library and not be used afterwards.
 */
void pg_model_free(struct PgModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PROTOGLYPH_H */
