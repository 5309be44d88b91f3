#ifndef DELTAMEM_H
#define DELTAMEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum DmStatus {
  DM_STATUS_OK = 0,
  DM_STATUS_NULL_POINTER = 1,
  DM_STATUS_INVALID_ARGUMENT = 2,
  DM_STATUS_IO = 3,
  DM_STATUS_FORMAT = 4,
  DM_STATUS_SHAPE = 5,
  DM_STATUS_NON_FINITE = 6,
  DM_STATUS_OUT_OF_VOCAB = 7,
  DM_STATUS_TOO_LONG = 8,
  DM_STATUS_BUFFER_TOO_SMALL = 9,
  DM_STATUS_INTERNAL = 10,
} DmStatus;

/**
 * A trained model (frozen backbone plus memory).
 */
typedef struct DmModel DmModel;

/**
 * A memory state for one model.
 */
typedef struct DmState DmState;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next call on the same thread.
 */
const char *dm_last_error_message(void);

/**
 * Loads a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DmStatus dm_model_load(const char *path, struct DmModel **out);

/**
 * # Safety
 * `model` must come from [`dm_model_load`] and not be used afterwards.
 */
void dm_model_free(struct DmModel *model);

/**
 * Vocabulary size, i.e. the length of a logits row.
 *
 * # Safety
 * `model` must be a live handle or null (returns 0).
 */
size_t dm_model_vocab_size(const struct DmModel *model);

/**
 * Trainable parameter count of a loaded model.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DmStatus dm_model_params_count(const struct DmModel *model, size_t *out);

/**
 * Closed-form trainable parameter count for `n_hooked_layers` layers of
 * width `d_model`, rank `rank`, `n_states` sub-states and steering branches
 * given as a string such as `"qo"`.
 *
 * # Safety
 * `branches` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DmStatus dm_params_count(size_t d_model,
                              size_t n_hooked_layers,
                              size_t rank,
                              size_t n_states,
                              const char *branches,
                              size_t *out);

/**
 * Fresh all-zero state shaped for `model`.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum DmStatus dm_state_new(const struct DmModel *model, struct DmState **out);

/**
 * # Safety
 * `state` must come from this library and not be used afterwards.
 */
void dm_state_free(struct DmState *state);

/**
 * # Safety
 * `state` must be live and `path` NUL-terminated.
 */
enum DmStatus dm_state_save(const struct DmState *state, const char *path);

/**
 * # Safety
 * `path` must be NUL-terminated and `out` valid.
 */
enum DmStatus dm_state_load(const char *path, struct DmState **out);

/**
 * Writes `len` context tokens into `state`. `segments` may be null, in
 * which case every token is its own segment.
 *
 * # Safety
 * Pointers must be valid for `len` elements; `model` and `state` live.
 */
enum DmStatus dm_ingest(const struct DmModel *model,
                        struct DmState *state,
                        const uint32_t *tokens,
                        const uint32_t *segments,
                        size_t len);

/**
 * Next-token logits after `prompt` given `state`, written to `logits`
 * (capacity `logits_len`, at least the vocabulary size). The state is not
 * modified.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum DmStatus dm_query(const struct DmModel *model,
                       const struct DmState *state,
                       const uint32_t *prompt,
                       size_t prompt_len,
                       float *logits,
                       size_t logits_len);

/**
 * Greedy answer of `answer_len` tokens restricted to `alphabet`, ties to
 * the lowest id.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum DmStatus dm_generate(const struct DmModel *model,
                          const struct DmState *state,
                          const uint32_t *prompt,
                          size_t prompt_len,
                          const uint32_t *alphabet,
                          size_t alphabet_len,
                          uint32_t *answer,
                          size_t answer_len);

/**
 * Index of the largest of `row[allowed[i]]`, ties to the first.
 *
 * # Safety
 * Pointers must be valid for their stated lengths.
 */
enum DmStatus dm_constrained_argmax(const float *row,
                                    size_t row_len,
                                    const uint32_t *allowed,
                                    size_t allowed_len,
                                    uint32_t *out);

/**
 * One gated delta write on a row-major `rank x rank` matrix in place:
 * `S <- Diag(1-beta) S + Diag(beta) (v - S k) k^T`.
 *
 * # Safety
 * `s` must hold `rank * rank` floats and the vectors `rank` each.
 */
enum DmStatus dm_delta_write(float *s,
                             const float *key,
                             const float *value,
                             const float *beta,
                             size_t rank);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DELTAMEM_H */
