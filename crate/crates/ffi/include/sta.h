#ifndef STA_H
#define STA_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum StaStatus {
  STA_STATUS_OK = 0,
  STA_STATUS_NULL_POINTER = 1,
  STA_STATUS_INVALID_UTF8 = 2,
  STA_STATUS_INVALID_ARGUMENT = 3,
  STA_STATUS_IO = 4,
  STA_STATUS_PARSE = 5,
  STA_STATUS_DATASET = 6,
  STA_STATUS_TEMPLATE = 7,
  STA_STATUS_BACKEND = 8,
  STA_STATUS_CONFIG = 9,
  STA_STATUS_PANIC = 10,
} StaStatus;

typedef enum StaEdaOp {
  STA_EDA_OP_SYNONYM_REPLACE = 0,
  STA_EDA_OP_RANDOM_INSERT = 1,
  STA_EDA_OP_RANDOM_SWAP = 2,
  STA_EDA_OP_RANDOM_DELETE = 3,
} StaEdaOp;

/**
 * Opaque labeled dataset.
 */
typedef struct StaDataset StaDataset;

/**
 * Opaque model fine-tuned by the built-in mock backend.
 */
typedef struct StaModel StaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent call on this thread if it failed,
 * otherwise NULL. The pointer is valid until the next call into the library
 * from this thread.
 */
const char *sta_last_error(void);

/**
 * # Safety
 * `s` must come from this library and not have been freed.
 */
void sta_string_free(char *s);

/**
 * Loads a JSONL dataset whose inventory is the sorted set of labels seen.
 *
 * # Safety
 * `path` and `topic` must be NUL-terminated strings; `out` must be writable.
 */
enum StaStatus sta_dataset_load(const char *path, const char *topic, struct StaDataset **out);

/**
 * Loads a JSONL dataset described by a metadata sidecar file.
 *
 * # Safety
 * `path` and `meta_path` must be NUL-terminated strings; `out` must be writable.
 */
enum StaStatus sta_dataset_load_with_meta(const char *path,
                                          const char *meta_path,
                                          struct StaDataset **out);

/**
 * # Safety
 * `d` must be NULL or a live handle from this library.
 */
void sta_dataset_free(struct StaDataset *d);

/**
 * Number of examples; 0 for NULL.
 *
 * # Safety
 * `d` must be NULL or a live handle.
 */
size_t sta_dataset_len(const struct StaDataset *d);

/**
 * Size of the label inventory; 0 for NULL.
 *
 * # Safety
 * `d` must be NULL or a live handle.
 */
size_t sta_dataset_num_labels(const struct StaDataset *d);

/**
 * Converts `d` into prompt pairs and writes them as JSONL to `out_path`.
 *
 * # Safety
 * `d` must be a live handle, `out_path` a NUL-terminated string and
 * `n_pairs` NULL or writable.
 */
enum StaStatus sta_convert_to_file(const struct StaDataset *d,
                                   bool two_prompt,
                                   uint64_t seed,
                                   const char *out_path,
                                   size_t *n_pairs);

/**
 * Converts `d` and fine-tunes the mock backend on the pairs with default
 * parameters and the given `epochs`.
 *
 * # Safety
 * `d` must be a live handle and `out` writable.
 */
enum StaStatus sta_model_finetune_mock(const struct StaDataset *d,
                                       bool two_prompt,
                                       size_t epochs,
                                       uint64_t seed,
                                       struct StaModel **out);

/**
 * # Safety
 * `m` must be NULL or a live handle from this library.
 */
void sta_model_free(struct StaModel *m);

/**
 * Model fingerprint as a newly allocated hex string.
 *
 * # Safety
 * `m` must be a live handle and `out` writable.
 */
enum StaStatus sta_model_fingerprint(const struct StaModel *m, char **out);

/**
 * Samples `count` continuations of `prefix`; `out_json` receives a JSON
 * array of strings.
 *
 * # Safety
 * `m` must be a live handle, `prefix` a NUL-terminated string and `out_json`
 * writable.
 */
enum StaStatus sta_model_generate(const struct StaModel *m,
                                  const char *prefix,
                                  size_t top_k,
                                  double top_p,
                                  size_t max_new_tokens,
                                  uint64_t seed,
                                  size_t count,
                                  char **out_json);

/**
 * Log-probability of `target` given `source`.
 *
 * # Safety
 * `m` must be a live handle, the strings NUL-terminated and `out` writable.
 */
enum StaStatus sta_model_score(const struct StaModel *m,
                               const char *source,
                               const char *target,
                               double *out);

/**
 * Runs conversion, mock fine-tuning, generation and selection on `d`.
 * `config_json` is an augmentation configuration object (NULL or `{}` for
 * defaults). `out_jsonl` receives the selected examples as JSON lines.
 *
 * # Safety
 * `d` must be a live handle, `config_json` NULL or NUL-terminated and
 * `out_jsonl` writable.
 */
enum StaStatus sta_augment(const struct StaDataset *d,
                           const char *config_json,
                           size_t epochs,
                           char **out_jsonl);

/**
 * Unique over total word trigrams of `n` texts. Fails with
 * `INVALID_ARGUMENT` when no text has three words.
 *
 * # Safety
 * `texts` must point to `n` NUL-terminated strings and `out` be writable.
 */
enum StaStatus sta_diversity(const char *const *texts, size_t n, double *out);

/**
 * Numerically stable softmax of `n` scores into `out` (which may alias `u`).
 *
 * # Safety
 * `u` and `out` must point to `n` doubles.
 */
enum StaStatus sta_softmax(const double *u, size_t n, double *out);

/**
 * Ranks `n` candidates by confidence `q` (descending), then score `u`
 * (descending), then index, and writes the indices of the first
 * `min(keep, n)` into `out_indices`; their number goes to `out_len`.
 *
 * # Safety
 * `q` and `u` must point to `n` doubles, `out_indices` to `keep` slots and
 * `out_len` must be writable.
 */
enum StaStatus sta_select_top(const double *q,
                              const double *u,
                              size_t n,
                              size_t keep,
                              size_t *out_indices,
                              size_t *out_len);

/**
 * Applies one word-level edit operation with the built-in lexicon.
 *
 * # Safety
 * `text` must be NUL-terminated and `out` writable.
 */
enum StaStatus sta_eda(const char *text,
                       enum StaEdaOp op,
                       double op_fraction,
                       double deletion_prob,
                       uint64_t seed,
                       char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STA_H */
