#ifndef VSC_ENGINE_H
#define VSC_ENGINE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. Zero is success.
typedef enum VscStatus {
  VSC_STATUS_OK = 0,
  VSC_STATUS_NULL_ARGUMENT = 1,
  VSC_STATUS_INVALID_UTF8 = 2,
  VSC_STATUS_INVALID_JSON = 3,
  VSC_STATUS_INVALID_DOCUMENT = 4,
  VSC_STATUS_INVALID_GOLD = 5,
  VSC_STATUS_INVALID_ARGUMENT = 6,
  // The record was read but could not be scored; the output still holds
  // the error object.
  VSC_STATUS_RECORD_ERROR = 7,
  VSC_STATUS_BUFFER_TOO_SMALL = 8,
  VSC_STATUS_SHAPE_MISMATCH = 9,
  VSC_STATUS_PANIC = 10,
} VscStatus;

// Opaque scorer over a fixed document set and gold file.
typedef struct VscScorer VscScorer;

// Composite reward weights.
typedef struct VscWeights {
  double lambda_q;
  double lambda_v;
  double lambda_s;
  double lambda_r;
} VscWeights;

// Layout loss terms: `total = kl + lambda_c * center`.
typedef struct VscLoss {
  double kl;
  double center;
  double total;
} VscLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *vsc_version(void);

// Message of the last failed call on this thread; empty after a success.
// Valid until the next call on the same thread.
const char *vsc_last_error(void);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void vsc_string_free(char *s);

// Creates a scorer.
//
// `docs_json` is one document object or an array of them; `gold_jsonl`
// holds one gold line per question. `weights` may be null for the
// defaults. `tau` overrides every gold threshold when in `[0, 1]`; pass a
// negative value to keep each record's own.
//
// # Safety
// String arguments must be NUL-terminated; `out` must be writable.
enum VscStatus vsc_scorer_new(const char *docs_json,
                              const char *gold_jsonl,
                              const struct VscWeights *weights,
                              bool gated,
                              double tau,
                              struct VscScorer **out);

// Frees a scorer. Null is ignored.
//
// # Safety
// `scorer` must come from [`vsc_scorer_new`] and not have been freed.
void vsc_scorer_free(struct VscScorer *scorer);

// Scores one rollout line and writes the breakdown JSON (the same object
// the `score` command prints) to `out`. When the record cannot be scored
// the status is `RECORD_ERROR` and `out` holds the error object.
//
// # Safety
// `scorer` must be live; `line` NUL-terminated; `out` writable.
enum VscStatus vsc_scorer_score(const struct VscScorer *scorer, const char *line, char **out);

// Runs the rejection filter on one rollout line; `retain` is set to
// whether it is kept.
//
// # Safety
// `scorer` must be live; `line` NUL-terminated; `retain` writable.
enum VscStatus vsc_scorer_filter(const struct VscScorer *scorer, const char *line, bool *retain);

// Builds the `h`×`w` supervision map of a document's OCR line boxes into
// `out` (row-major, `len >= h * w`).
//
// # Safety
// `doc_json` must be NUL-terminated; `out` must hold `len` doubles.
enum VscStatus vsc_supervision_map(const char *doc_json,
                                   size_t h,
                                   size_t w,
                                   double *out,
                                   size_t len);

// Layout loss of a predicted map `p` against a target `y`, both `h`×`w`
// row-major distributions.
//
// # Safety
// `y` and `p` must hold `h * w` doubles; `out` must be writable.
enum VscStatus vsc_layout_loss(const double *y,
                               const double *p,
                               size_t h,
                               size_t w,
                               double lambda_c,
                               struct VscLoss *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* VSC_ENGINE_H */
