#ifndef ADDMARK_H
#define ADDMARK_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result code of every fallible call.
typedef enum AddmarkStatus {
  ADDMARK_STATUS_OK = 0,
  ADDMARK_STATUS_NULL_POINTER = 1,
  ADDMARK_STATUS_INVALID_ARGUMENT = 2,
  ADDMARK_STATUS_DIMENSION_MISMATCH = 3,
  ADDMARK_STATUS_IO = 4,
  ADDMARK_STATUS_FORMAT = 5,
  ADDMARK_STATUS_TOO_FEW_SCORES = 6,
  ADDMARK_STATUS_PANIC = 99,
} AddmarkStatus;

// Opaque message dictionary handle.
typedef struct AddmarkDictionary AddmarkDictionary;

// Opaque watermark handle.
typedef struct AddmarkWatermark AddmarkWatermark;

// Detection outcome. `dict_score` is NaN without a dictionary; the decoded
// message goes to a separate caller buffer.
typedef struct AddmarkDetection {
  double score;
  double dict_score;
  double threshold;
  bool detected;
} AddmarkDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next failing call on the same thread.
const char *addmark_last_error(void);

// Library version as a static NUL-terminated string.
const char *addmark_version(void);

// Loads a `.addwm` file into `*out`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum AddmarkStatus addmark_watermark_load(const char *path, struct AddmarkWatermark **out);

// Parses the bytes of a `.addwm` file into `*out`.
//
// # Safety
// `data` must point to `len` readable bytes and `out` be a valid pointer.
enum AddmarkStatus addmark_watermark_from_bytes(const uint8_t *data,
                                                size_t len,
                                                struct AddmarkWatermark **out);

// Releases a watermark. Null is ignored.
//
// # Safety
// `w` must come from this library and not be used afterwards.
void addmark_watermark_free(struct AddmarkWatermark *w);

// Number of message bits, or 0 for null.
//
// # Safety
// `w` must be null or a live handle.
size_t addmark_watermark_bits(const struct AddmarkWatermark *w);

// Image length `C·H·W`, or 0 for null.
//
// # Safety
// `w` must be null or a live handle.
size_t addmark_watermark_dim(const struct AddmarkWatermark *w);

// Writes channels, height and width into `shape[0..3]`.
//
// # Safety
// `w` must be a live handle and `shape` point to 3 writable values.
enum AddmarkStatus addmark_watermark_shape(const struct AddmarkWatermark *w, size_t *shape);

// Adds `Σ_k m_k w_k` to `image` and writes the result to `out`
// (which may alias `image`). With `clip`, pixels are clamped to the
// watermark's value range.
//
// # Safety
// `image` and `out` must hold `len` doubles, `message` `bits` bytes.
enum AddmarkStatus addmark_embed(const struct AddmarkWatermark *w,
                                 const double *image,
                                 size_t len,
                                 const int8_t *message,
                                 size_t bits,
                                 bool clip,
                                 double *out);

// Inner products of `image` with each watermark vector, into `gamma[0..bits]`.
//
// # Safety
// `image` must hold `len` doubles and `gamma` `bits` doubles.
enum AddmarkStatus addmark_inner_products(const struct AddmarkWatermark *w,
                                          const double *image,
                                          size_t len,
                                          double *gamma,
                                          size_t bits);

// Bitwise sign decode of `gamma` into `message` (zero decodes to `+1`).
//
// # Safety
// `gamma` must hold `bits` doubles and `message` `bits` bytes.
enum AddmarkStatus addmark_decode_sign(const double *gamma, size_t bits, int8_t *message);

// Parses a dictionary: one message of `+`/`-` per line.
//
// # Safety
// `text` must be NUL-terminated and `out` a valid pointer.
enum AddmarkStatus addmark_dictionary_parse(const char *text, struct AddmarkDictionary **out);

// Releases a dictionary. Null is ignored.
//
// # Safety
// `d` must come from this library and not be used afterwards.
void addmark_dictionary_free(struct AddmarkDictionary *d);

// Number of messages, or 0 for null.
//
// # Safety
// `d` must be null or a live handle.
size_t addmark_dictionary_len(const struct AddmarkDictionary *d);

// Best dictionary message for `gamma` and its score.
//
// # Safety
// `gamma` must hold `bits` doubles, `message` `bits` bytes; `score` may be null.
enum AddmarkStatus addmark_decode_dictionary(const struct AddmarkDictionary *d,
                                             const double *gamma,
                                             size_t bits,
                                             int8_t *message,
                                             double *score);

// Detection score of an unwatermarked image, for calibration: the sum of
// absolute inner products, or the dictionary score when `d` is non-null.
//
// # Safety
// `image` must hold `len` doubles; `d` may be null.
enum AddmarkStatus addmark_score(const struct AddmarkWatermark *w,
                                 const struct AddmarkDictionary *d,
                                 const double *image,
                                 size_t len,
                                 double *out);

// Threshold whose exceed rate on `scores` is at most `alpha`.
//
// # Safety
// `scores` must hold `n` doubles and `out` be a valid pointer.
enum AddmarkStatus addmark_calibrate_threshold(const double *scores,
                                               size_t n,
                                               double alpha,
                                               double *out);

// Detects against `threshold` and decodes. With a dictionary the decision
// uses the dictionary score and the decoded message is a dictionary entry.
//
// # Safety
// `image` must hold `len` doubles, `message` `bits` bytes; `d` may be null.
enum AddmarkStatus addmark_detect(const struct AddmarkWatermark *w,
                                  const struct AddmarkDictionary *d,
                                  const double *image,
                                  size_t len,
                                  double threshold,
                                  struct AddmarkDetection *result,
                                  int8_t *message,
                                  size_t bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADDMARK_H */
