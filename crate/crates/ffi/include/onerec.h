#ifndef ONEREC_H
#define ONEREC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum OnerecStatus {
  ONEREC_STATUS_OK = 0,
  ONEREC_STATUS_NULL_ARGUMENT = 1,
  ONEREC_STATUS_INVALID_ARGUMENT = 2,
  ONEREC_STATUS_MISSING_ARTIFACT = 3,
  ONEREC_STATUS_INTEGRITY = 4,
  ONEREC_STATUS_IO = 5,
  ONEREC_STATUS_BUFFER_TOO_SMALL = 6,
  ONEREC_STATUS_NO_REWARD_MODEL = 7,
  ONEREC_STATUS_INTERNAL = 8,
} OnerecStatus;

/**
 * Opaque recommender handle.
 */
typedef struct OnerecRecommender OnerecRecommender;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Opens the run directory `run_dir`. `model_path` may be null to use the
 * aligned checkpoint when present and the seed checkpoint otherwise. On
 * success `*out` receives a handle to release with
 * [`onerec_recommender_free`].
 *
 * # Safety
 * `run_dir` must be a NUL-terminated string, `model_path` null or a
 * NUL-terminated string, and `out` a valid pointer.
 */
enum OnerecStatus onerec_recommender_open(const char *run_dir,
                                          const char *model_path,
                                          struct OnerecRecommender **out);

/**
 * Releases a handle; null is ignored.
 *
 * # Safety
 * `handle` must come from [`onerec_recommender_open`] and not be used
 * afterwards.
 */
void onerec_recommender_free(struct OnerecRecommender *handle);

/**
 * Items per generated session, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
size_t onerec_session_size(const struct OnerecRecommender *handle);

/**
 * Number of catalog items, or 0 for a null handle.
 *
 * # Safety
 * `handle` must be null or a live handle.
 */
size_t onerec_catalog_size(const struct OnerecRecommender *handle);

/**
 * Beam-searches up to `top_n` sessions for a user with the given history
 * (oldest first). Session `j` is written to
 * `out_items[j * session_size .. (j + 1) * session_size]` and its
 * log-probability to `out_log_probs[j]` (which may be null). `*out_count`
 * receives the number of sessions written, best first.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out_items` must hold
 * `items_capacity` values.
 */
enum OnerecStatus onerec_generate(const struct OnerecRecommender *handle,
                                  const uint32_t *history,
                                  size_t history_len,
                                  size_t top_n,
                                  uint32_t *out_items,
                                  size_t items_capacity,
                                  double *out_log_probs,
                                  size_t *out_count);

/**
 * Reward-model predictions for one session: `out_targets` receives
 * (swt, vtr, wtr, ltr) and `out_score` (may be null) their configured
 * combination.
 *
 * # Safety
 * Pointers must be valid for the stated lengths; `out_targets` must hold
 * four values.
 */
enum OnerecStatus onerec_score(const struct OnerecRecommender *handle,
                               const uint32_t *history,
                               size_t history_len,
                               const uint32_t *session,
                               size_t session_len,
                               double *out_targets,
                               double *out_score);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to `capacity`, and returns its full length in bytes.
 *
 * # Safety
 * `buf` must be null or valid for `capacity` bytes.
 */
size_t onerec_last_error(char *buf, size_t capacity);

/**
 * Static description of a status code.
 */
const char *onerec_status_name(enum OnerecStatus status);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ONEREC_H */
