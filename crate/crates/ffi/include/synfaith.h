#ifndef SYNFAITH_H
#define SYNFAITH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_ARGUMENT = 1,
  SF_STATUS_INVALID_UTF8 = 2,
  SF_STATUS_INVALID_INPUT = 3,
  SF_STATUS_PARSE = 4,
  SF_STATUS_IO = 5,
  SF_STATUS_MODEL = 6,
  SF_STATUS_BACKEND = 7,
  SF_STATUS_BUFFER_TOO_SMALL = 8,
  SF_STATUS_PANIC = 9,
} SfStatus;

/**
 * A loaded faithfulness detector: trained aggregator, reference activations
 * and an alignment scorer.
 */
typedef struct SfDetector SfDetector;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *sf_version(void);

/**
 * Message of the last failed call on this thread, or null. The caller owns
 * the result and frees it with [`sf_string_free`].
 */
char *sf_last_error_message(void);

void sf_string_free(char *s);

/**
 * Load a detector from a saved model and extractor. `scorer_url` selects a
 * remote alignment service; pass null for the built-in lexical scorer.
 */
enum SfStatus sf_detector_load(const char *model_path,
                               const char *extractor_path,
                               const char *scorer_url,
                               struct SfDetector **out);

void sf_detector_free(struct SfDetector *det);

/**
 * Score every sentence of one trace given as a single-line JSON object.
 * `out_len` always receives the sentence count; when it exceeds `capacity`
 * nothing is written and the status is buffer-too-small.
 */
enum SfStatus sf_detector_score_trace(const struct SfDetector *det,
                                      const char *trace_json,
                                      double *out_scores,
                                      size_t capacity,
                                      size_t *out_len);

/**
 * AUROC of `scores` against `labels` (1 faithful, 0 unfaithful).
 */
enum SfStatus sf_auroc(const double *scores, const uint8_t *labels, size_t n, double *out);

/**
 * LID estimate of `query` from its `k` nearest neighbours among `n_refs`
 * reference points stored row-major with `dim` values each.
 */
enum SfStatus sf_lid_mle(const double *query,
                         const double *refs,
                         size_t n_refs,
                         size_t dim,
                         size_t k,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SYNFAITH_H */
