#ifndef JF_H
#define JF_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum JfStatus {
  JF_STATUS_OK = 0,
  JF_STATUS_NULL_POINTER = 1,
  JF_STATUS_INVALID_ARGUMENT = 2,
  JF_STATUS_BUFFER_TOO_SMALL = 3,
  JF_STATUS_IO = 4,
  JF_STATUS_FORMAT = 5,
  JF_STATUS_DIMENSION = 6,
  JF_STATUS_CONTRACT = 7,
  JF_STATUS_INDEX = 8,
  JF_STATUS_CAPACITY = 9,
  JF_STATUS_CONVERGENCE_FAILURE = 10,
  JF_STATUS_NUMERIC = 11,
  JF_STATUS_INTERNAL = 99,
} JfStatus;

/**
 * Decoding strategy for [`jf_decode`].
 */
typedef enum JfMethod {
  JF_METHOD_AR = 0,
  JF_METHOD_JACOBI = 1,
  JF_METHOD_EARLY_EXIT = 2,
} JfMethod;

/**
 * Opaque model handle.
 */
typedef struct JfModel JfModel;

/**
 * Per-call decode statistics.
 */
typedef struct JfDecodeStats {
  size_t iterations;
  double duration_us;
  double tokens_per_s;
  /**
   * Nonzero if early exit stopped before the fixed point.
   */
  uint8_t forced_exit;
} JfDecodeStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *jf_version(void);

/**
 * Message for the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *jf_last_error_message(void);

/**
 * Loads a checkpoint. On success `*out` owns a handle for [`jf_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum JfStatus jf_model_load(const char *path, struct JfModel **out);

/**
 * Releases a handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`jf_model_load`] and not be used afterwards.
 */
void jf_model_free(struct JfModel *model);

/**
 * Action tokens per decoded chunk for the model's task.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t jf_model_block_len(const struct JfModel *model);

/**
 * Vocabulary size of the model.
 *
 * # Safety
 * `model` must be a live handle.
 */
size_t jf_model_vocab_size(const struct JfModel *model);

/**
 * Decodes `n` tokens after `prompt` into `out` (capacity `out_cap`).
 * `exit_point` is read only for [`JfMethod::EarlyExit`]; `seed` picks the
 * Jacobi initial guess. `stats` may be NULL.
 *
 * # Safety
 * `prompt` must point to `prompt_len` ids and `out` to `out_cap` writable ids.
 */
enum JfStatus jf_decode(const struct JfModel *model,
                        enum JfMethod method,
                        const uint32_t *prompt,
                        size_t prompt_len,
                        size_t n,
                        size_t exit_point,
                        uint64_t seed,
                        uint32_t *out,
                        size_t out_cap,
                        struct JfDecodeStats *stats);

/**
 * Maps action tokens to continuous values (bin centres), 7 per action.
 * `out` needs `len` slots.
 *
 * # Safety
 * `tokens` must point to `len` ids and `out` to `out_cap` writable doubles.
 */
enum JfStatus jf_detokenize(const struct JfModel *model,
                            const uint32_t *tokens,
                            size_t len,
                            double *out,
                            size_t out_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* JF_H */
