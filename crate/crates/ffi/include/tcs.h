#ifndef TCS_H
#define TCS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum TcsStatus {
  TCS_STATUS_OK = 0,
  // Null pointer, bad UTF-8, wrong buffer length or an out-of-range index.
  TCS_STATUS_INVALID_ARGUMENT = 1,
  TCS_STATUS_IO = 2,
  TCS_STATUS_BACKEND = 3,
  TCS_STATUS_REGISTRY = 4,
  TCS_STATUS_DATASET = 5,
  TCS_STATUS_CONFIG = 6,
  TCS_STATUS_IMAGE = 7,
  TCS_STATUS_INTERNAL = 99,
} TcsStatus;

// Classifier built from a descriptor such as `bright-blob:person`, `quadrant` or
// `subprocess:<command>`.
typedef struct TcsClassifier TcsClassifier;

// Explanation mask with its metadata.
typedef struct TcsExplanation TcsExplanation;

// Decoded image.
typedef struct TcsImage TcsImage;

// Ordered set of feature specifications.
typedef struct TcsRegistry TcsRegistry;

typedef struct TcsPrf1 {
  double precision;
  double recall;
  double f1;
} TcsPrf1;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *tcs_last_error(void);

// Library version as a static string.
const char *tcs_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not have been freed already.
void tcs_string_free(char *s);

// Wraps `len` row-major samples with 1 or 3 channels.
//
// # Safety
// `id` must be a valid C string, `data` must point to `len` readable bytes and
// `out` must be writable.
enum TcsStatus tcs_image_new(const char *id,
                             uint32_t width,
                             uint32_t height,
                             uint32_t channels,
                             const uint8_t *data,
                             size_t len,
                             struct TcsImage **out);

// Reads a PNG or binary PPM/PGM file.
//
// # Safety
// `path` must be a valid C string and `out` writable.
enum TcsStatus tcs_image_open(const char *path, struct TcsImage **out);

// # Safety
// `img` must be null or a live handle from this library.
void tcs_image_free(struct TcsImage *img);

// # Safety
// `descriptor` must be a valid C string and `out` writable.
enum TcsStatus tcs_classifier_new(const char *descriptor, struct TcsClassifier **out);

// # Safety
// `cls` must be null or a live handle from this library.
void tcs_classifier_free(struct TcsClassifier *cls);

// Predictions on `img` as a JSON array of `{label, confidence, bbox}`.
//
// # Safety
// Handles must be live and `out_json` writable.
enum TcsStatus tcs_classify_json(const struct TcsClassifier *cls,
                                 const struct TcsImage *img,
                                 char **out_json);

// The face, hand and legs color-marker specifications used by the synthetic scenes.
//
// # Safety
// `out` must be writable.
enum TcsStatus tcs_registry_markers(struct TcsRegistry **out);

// Parses a registry from its JSON array form.
//
// # Safety
// `json` must be a valid C string and `out` writable.
enum TcsStatus tcs_registry_from_json(const char *json, struct TcsRegistry **out);

// # Safety
// `reg` must be a live handle.
size_t tcs_registry_len(const struct TcsRegistry *reg);

// # Safety
// `reg` must be null or a live handle from this library.
void tcs_registry_free(struct TcsRegistry *reg);

// Explains, detects features and scores every prediction on `img`. `config_json`
// may be null for defaults; otherwise it uses the CLI config schema. The result is
// a JSON object with a `predictions` array of breakdowns.
//
// # Safety
// Handles must be live, `config_json` null or a valid C string, `out_json` writable.
enum TcsStatus tcs_score_json(const struct TcsClassifier *cls,
                              const struct TcsRegistry *reg,
                              const struct TcsImage *img,
                              const char *config_json,
                              char **out_json);

// Explains prediction number `index` of the classifier's output on `img`.
//
// # Safety
// Handles must be live, `config_json` null or a valid C string, `out` writable.
enum TcsStatus tcs_explain(const struct TcsClassifier *cls,
                           const struct TcsImage *img,
                           size_t index,
                           const char *config_json,
                           struct TcsExplanation **out);

// # Safety
// `e` must be a live handle.
size_t tcs_explanation_pixels_used(const struct TcsExplanation *e);

// # Safety
// `e` must be a live handle.
bool tcs_explanation_converged(const struct TcsExplanation *e);

// # Safety
// `e` must be a live handle.
double tcs_explanation_confidence(const struct TcsExplanation *e);

// # Safety
// `e` must be a live handle.
size_t tcs_explanation_mutant_evaluations(const struct TcsExplanation *e);

// Copies the mask as one byte per pixel (1 explained, 0 not), row-major.
// `len` must equal width × height of the explained image.
//
// # Safety
// `e` must be a live handle and `buf` must point to `len` writable bytes.
enum TcsStatus tcs_explanation_mask(const struct TcsExplanation *e, uint8_t *buf, size_t len);

// # Safety
// `e` must be null or a live handle from this library.
void tcs_explanation_free(struct TcsExplanation *e);

// Percentage of the nonzero pixels of `feature` that are also nonzero in
// `explanation`. Both masks hold one byte per pixel, row-major.
//
// # Safety
// Both buffers must hold `width * height` readable bytes and `out` be writable.
enum TcsStatus tcs_overlap_ratio(const uint8_t *feature,
                                 const uint8_t *explanation,
                                 size_t width,
                                 size_t height,
                                 double *out);

// Precision, recall and F1 from raw counts, with 0/0 taken as 0.
//
// # Safety
// `out` must be writable.
enum TcsStatus tcs_prf1(size_t tp, size_t fp, size_t fn_, struct TcsPrf1 *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TCS_H */
