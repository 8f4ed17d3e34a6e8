/* C interface for the ssvaer soft-sensor engine.
 *
 * Load a checkpoint produced by the `ssvaer train` command into an opaque
 * handle, then run predictions on raw (unstandardized) lagged input rows.
 * Standardization and de-standardization use the statistics embedded in the
 * checkpoint.
 *
 * Every fallible call returns an SsvaerStatus; on failure the thread-local
 * message from ssvaer_last_error() describes what went wrong.
 *
 * Kept in sync with the exported symbols by the crate's test suite.
 */

#ifndef SSVAER_H
#define SSVAER_H

#include <stddef.h>

#ifdef __cplusplus
extern "C" {
#endif

typedef enum SsvaerStatus {
  SSVAER_OK = 0,
  SSVAER_NULL_ARGUMENT = 1,
  SSVAER_INVALID_UTF8 = 2,
  SSVAER_LOAD_FAILED = 3,
  SSVAER_PREDICT_FAILED = 4,
  SSVAER_BAD_LEVEL = 5,
  SSVAER_PANIC = 6,
} SsvaerStatus;

/* Opaque trained-model handle. */
typedef struct SsvaerModel SsvaerModel;

/* Library version; static storage, do not free. */
const char *ssvaer_version(void);

/* Copy the calling thread's last error message into buf (NUL-terminated,
 * truncated to cap bytes). Returns the full message length. buf may be NULL
 * to query the length only. */
size_t ssvaer_last_error(char *buf, size_t cap);

/* Load a checkpoint file. On SSVAER_OK, *out_model owns a handle that must be
 * released with ssvaer_model_free. */
SsvaerStatus ssvaer_model_load(const char *path, SsvaerModel **out_model);

/* Release a handle. NULL is a no-op. */
void ssvaer_model_free(SsvaerModel *model);

/* Number of doubles in one input row (the lagged feature vector). */
size_t ssvaer_model_input_width(const SsvaerModel *model);

/* Predict the quality variable for n_rows rows (row-major,
 * n_rows x input_width doubles). out_mean receives n_rows de-standardized
 * means; out_var (optional, may be NULL) receives n_rows variances. */
SsvaerStatus ssvaer_predict(const SsvaerModel *model, const double *rows,
                            size_t n_rows, double *out_mean, double *out_var);

/* Predict with two-sided confidence bounds at the given level (0 < level < 1).
 * out_mean, out_lower, out_upper each receive n_rows doubles. */
SsvaerStatus ssvaer_predict_ci(const SsvaerModel *model, const double *rows,
                               size_t n_rows, double level, double *out_mean,
                               double *out_lower, double *out_upper);

#ifdef __cplusplus
}
#endif

#endif /* SSVAER_H */
