#ifndef NORMGEN_H
#define NORMGEN_H

/* Generated by cbindgen from normgen-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum NgStatus {
  NG_OK = 0,
  /**
   * A required pointer argument was null.
   */
  NG_NULL_ARGUMENT = 1,
  /**
   * A string argument was not valid UTF-8.
   */
  NG_INVALID_UTF8 = 2,
  /**
   * Checkpoint could not be read or parsed.
   */
  NG_LOAD_FAILED = 3,
  /**
   * Input rejected by the model (empty, unknown tokens, bad shape).
   */
  NG_INVALID_INPUT = 4,
  /**
   * Any other internal failure.
   */
  NG_INTERNAL = 5,
} NgStatus;

/**
 * Opaque classifier handle.
 */
typedef struct NgClassifier NgClassifier;

/**
 * Opaque language-model handle.
 */
typedef struct NgLm NgLm;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread. Never null.
 */
const char *ng_last_error(void);

/**
 * Load a classifier checkpoint directory. On success writes a handle to
 * `out`; release it with `ng_classifier_free`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum NgStatus ng_classifier_load(const char *dir, struct NgClassifier **out);

/**
 * Classify a sentence. Writes the acceptability probability and the
 * thresholded label (1 = acceptable, 0 = flagged).
 *
 * # Safety
 * `handle` must come from `ng_classifier_load`; `text` must be a valid
 * NUL-terminated string; `probability` and `label` must be valid pointers.
 */
enum NgStatus ng_classifier_classify(const struct NgClassifier *handle,
                                     const char *text,
                                     double *probability,
                                     uint8_t *label);

/**
 * # Safety
 * `handle` must come from `ng_classifier_load` and not be freed twice.
 */
void ng_classifier_free(struct NgClassifier *handle);

/**
 * Load a language-model checkpoint directory. Release the handle with
 * `ng_lm_free`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum NgStatus ng_lm_load(const char *dir, struct NgLm **out);

/**
 * Sample a continuation of `prompt`. Writes a heap-allocated string to
 * `out_text`; release it with `ng_string_free`. Deterministic in `seed`.
 *
 * # Safety
 * `handle` must come from `ng_lm_load`; `prompt` must be a valid
 * NUL-terminated string; `out_text` must be a valid pointer.
 */
enum NgStatus ng_lm_generate(const struct NgLm *handle,
                             const char *prompt,
                             uintptr_t max_new,
                             double temperature,
                             uintptr_t top_k,
                             uint64_t seed,
                             char **out_text);

/**
 * Free a string returned by `ng_lm_generate`.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void ng_string_free(char *s);

/**
 * # Safety
 * `handle` must come from `ng_lm_load` and not be freed twice.
 */
void ng_lm_free(struct NgLm *handle);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NORMGEN_H */
