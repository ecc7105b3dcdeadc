#ifndef A3NET_H
#define A3NET_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum A3Status {
  A3_STATUS_OK = 0,
  A3_STATUS_NULL_ARGUMENT = 1,
  A3_STATUS_INVALID_UTF8 = 2,
  A3_STATUS_IO = 3,
  A3_STATUS_FORMAT = 4,
  A3_STATUS_CONFIG = 5,
  A3_STATUS_SHAPE = 6,
  A3_STATUS_CONTRACT = 7,
  A3_STATUS_NON_FINITE = 8,
  A3_STATUS_PANIC = 9,
} A3Status;

/**
 * Opaque handle to a loaded model.
 */
typedef struct A3Model A3Model;

/**
 * Corpus-level scores, each in `[0, 1]`.
 */
typedef struct A3Metrics {
  double bleu1;
  double bleu2;
  double bleu3;
  double bleu4;
  double meteor;
  double rouge_l;
} A3Metrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *a3net_version(void);

/**
 * Message for the last failed call on this thread, or NULL if the last
 * call succeeded. Valid until the next call into the library.
 */
const char *a3net_last_error(void);

/**
 * Loads a checkpoint written by `a3net train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum A3Status a3net_model_load(const char *path, struct A3Model **out);

/**
 * Releases a model handle. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`a3net_model_load`] and not be used afterwards.
 */
void a3net_model_free(struct A3Model *model);

/**
 * Number of tokens in the model's vocabulary, 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t a3net_model_vocab_size(const struct A3Model *model);

/**
 * Overrides the beam width used by [`a3net_model_generate`]; 1 selects
 * greedy decoding.
 *
 * # Safety
 * `model` must be a live handle.
 */
enum A3Status a3net_model_set_beam(struct A3Model *model, size_t beam);

/**
 * Generates a report for one sample of `views` images, each row-major
 * `height × width × channels` with values in `[0, 1]`, stored back to back
 * in `pixels`. On success `*out_text` receives a string to be released with
 * [`a3net_string_free`].
 *
 * # Safety
 * `pixels` must point to `views * height * width * channels` floats and
 * `out_text` must be a valid pointer.
 */
enum A3Status a3net_model_generate(const struct A3Model *model,
                                   const float *pixels,
                                   size_t views,
                                   size_t height,
                                   size_t width,
                                   size_t channels,
                                   char **out_text);

/**
 * Scores `count` candidate reports against references of the same index.
 *
 * # Safety
 * `candidates` and `references` must each point to `count` NUL-terminated
 * strings; `out` must be a valid pointer.
 */
enum A3Status a3net_evaluate(const char *const *candidates,
                             const char *const *references,
                             size_t count,
                             struct A3Metrics *out);

/**
 * Releases a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void a3net_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* A3NET_H */
