#ifndef DELTA_H
#define DELTA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DeltaStatus {
  DELTA_STATUS_OK = 0,
  DELTA_STATUS_NULL_POINTER = 1,
  DELTA_STATUS_INVALID_ARGUMENT = 2,
  DELTA_STATUS_SHAPE = 3,
  DELTA_STATUS_CONFIG = 4,
  DELTA_STATUS_INDEX = 5,
  DELTA_STATUS_CONTRACT = 6,
  DELTA_STATUS_LOOKUP = 7,
  DELTA_STATUS_VALIDATION = 8,
  DELTA_STATUS_NON_FINITE = 9,
  DELTA_STATUS_PARSE = 10,
  DELTA_STATUS_DIVERGED = 11,
  DELTA_STATUS_IO = 12,
  DELTA_STATUS_PANIC = 13,
} DeltaStatus;

/**
 * Per-sample filter attention weights.
 */
typedef struct DeltaAttention DeltaAttention;

/**
 * A labeled image set.
 */
typedef struct DeltaDataset DeltaDataset;

/**
 * A trained network.
 */
typedef struct DeltaModel DeltaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failure on this thread, or null. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *delta_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *delta_version(void);

/**
 * Loads a checkpoint into a new model handle.
 */
enum DeltaStatus delta_model_load(const char *path, struct DeltaModel **out);

void delta_model_free(struct DeltaModel *model);

/**
 * Writes the `(C, H, W)` input shape into `shape[0..3]`.
 */
enum DeltaStatus delta_model_input_shape(const struct DeltaModel *model, size_t *shape);

enum DeltaStatus delta_model_num_classes(const struct DeltaModel *model, size_t *out);

/**
 * Order-sensitive checksum over all parameter values.
 */
enum DeltaStatus delta_model_checksum(const struct DeltaModel *model, uint64_t *out);

/**
 * Logits for `batch` images stored contiguously as `(B, C, H, W)`.
 * `logits` must hold `batch * num_classes` values.
 */
enum DeltaStatus delta_model_forward(const struct DeltaModel *model,
                                     const double *images,
                                     size_t batch,
                                     double *logits,
                                     size_t logits_len);

/**
 * Loads a dataset file or class-directory tree.
 */
enum DeltaStatus delta_dataset_load(const char *path, struct DeltaDataset **out);

void delta_dataset_free(struct DeltaDataset *dataset);

enum DeltaStatus delta_dataset_len(const struct DeltaDataset *dataset, size_t *out);

enum DeltaStatus delta_dataset_num_classes(const struct DeltaDataset *dataset, size_t *out);

/**
 * Loads an attention table.
 */
enum DeltaStatus delta_attention_load(const char *path, struct DeltaAttention **out);

void delta_attention_free(struct DeltaAttention *table);

enum DeltaStatus delta_attention_len(const struct DeltaAttention *table, size_t *out);

/**
 * Copies the weights of `sample` at tap `layer` into `out`, which holds
 * `capacity` values; the filter count goes to `written`.
 */
enum DeltaStatus delta_attention_weights(const struct DeltaAttention *table,
                                         size_t sample,
                                         size_t layer,
                                         double *out,
                                         size_t capacity,
                                         size_t *written);

/**
 * Runs the full experiment described by a TOML file.
 */
enum DeltaStatus delta_run_experiment(const char *config_path);

/**
 * Step decay: `base * factor^floor(iteration / step)`.
 */
double delta_step_lr(double base_lr, double factor, size_t step, size_t iteration);

/**
 * Exponential decay: `base * factor^epoch`.
 */
double delta_exponential_lr(double base_lr, double factor, size_t epoch);

/**
 * Numerically stable softmax of `n` values.
 */
enum DeltaStatus delta_softmax(const double *values, size_t n, double *out);

/**
 * Min-max normalization of a row-major `rows x cols` map; constant maps
 * become zeros.
 */
enum DeltaStatus delta_normalize_activation_map(const double *map,
                                                size_t rows,
                                                size_t cols,
                                                double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTA_H */
