#ifndef LIKEFILTER_H
#define LIKEFILTER_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LfStatus {
  LF_OK = 0,
  LF_NULL_ARGUMENT = 1,
  LF_INVALID_UTF8 = 2,
  LF_INVALID_ARGUMENT = 3,
  LF_IO = 4,
  LF_INTERNAL = 5,
} LfStatus;

/**
 * Opaque blocklist handle.
 */
typedef struct LfBlocklist LfBlocklist;

/**
 * Opaque handle to a reference n-gram model.
 */
typedef struct LfModel LfModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *lf_version(void);

/**
 * Message for the last failed call on this thread, or an empty string. The
 * pointer stays valid until the next library call on this thread.
 */
const char *lf_last_error_message(void);

/**
 * Frees a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void lf_string_free(char *s);

/**
 * Tokenizes `text` and writes a JSON array of tokens to `*out_json`.
 *
 * # Safety
 * `text` must be a NUL-terminated string; `out_json` must be writable.
 */
enum LfStatus lf_tokenize_json(const char *text, char **out_json);

/**
 * 1 if a document with max score `score` is removed at threshold `theta`
 * (strictly greater), 0 if retained, -1 if either value is not finite.
 */
int lf_threshold_removes(double score, double theta);

/**
 * Loads a blocklist file and an optional allowlist file (NULL for none).
 *
 * # Safety
 * Paths must be NUL-terminated strings; `out` must be writable.
 */
enum LfStatus lf_blocklist_load(const char *entries_path,
                                const char *allowlist_path,
                                struct LfBlocklist **out);

/**
 * Builds a blocklist from in-memory file contents (one word per line).
 *
 * # Safety
 * `entries` must be a NUL-terminated string, `allowlist` NULL or one;
 * `out` must be writable.
 */
enum LfStatus lf_blocklist_from_text(const char *entries,
                                     const char *allowlist,
                                     struct LfBlocklist **out);

/**
 * Sets `*out_matched` to 1 and `*out_word` to the first blocklisted token of
 * `text`, or to 0 and NULL when nothing matches.
 *
 * # Safety
 * `blocklist` must be a live handle; `text` a NUL-terminated string;
 * `out_word` and `out_matched` writable.
 */
enum LfStatus lf_blocklist_match(const struct LfBlocklist *blocklist,
                                 const char *text,
                                 char **out_word,
                                 int *out_matched);

/**
 * # Safety
 * `blocklist` must be NULL or a handle not yet freed.
 */
void lf_blocklist_free(struct LfBlocklist *blocklist);

/**
 * Loads a reference model written by `likefilter train-ref`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum LfStatus lf_model_load(const char *path, struct LfModel **out);

/**
 * Mean per-token log-probability (nats) of `trigger` given the start of
 * `document`, with the excerpt truncated so both fit in `budget` tokens.
 *
 * # Safety
 * `model` must be a live handle; strings NUL-terminated; outputs writable.
 */
enum LfStatus lf_model_score_trigger(const struct LfModel *model,
                                     const char *document,
                                     const char *trigger,
                                     size_t budget,
                                     double *out_mean,
                                     size_t *out_tokens);

/**
 * Vocabulary size including the unknown-token entry; 0 for NULL.
 *
 * # Safety
 * `model` must be NULL or a live handle.
 */
size_t lf_model_vocab_size(const struct LfModel *model);

/**
 * # Safety
 * `model` must be NULL or a handle not yet freed.
 */
void lf_model_free(struct LfModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LIKEFILTER_H */
