#ifndef CTCAT_H
#define CTCAT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Character-level similarity groups.
 */
#define CTCAT_LEVEL_CHARACTER 0

/**
 * Word-level similarity groups.
 */
#define CTCAT_LEVEL_WORD 1

/**
 * One group for the whole keyword.
 */
#define CTCAT_LEVEL_PHRASE 2

typedef enum CtcatStatus {
  CTCAT_STATUS_OK = 0,
  CTCAT_STATUS_NULL_POINTER = 1,
  CTCAT_STATUS_INVALID_ARGUMENT = 2,
  CTCAT_STATUS_IO = 3,
  CTCAT_STATUS_FORMAT = 4,
  CTCAT_STATUS_VOCABULARY = 5,
  CTCAT_STATUS_DIMENSION_MISMATCH = 6,
  CTCAT_STATUS_PANIC = 7,
} CtcatStatus;

/**
 * Opaque detector handle.
 */
typedef struct CtcatDetector CtcatDetector;

/**
 * Score of one frame.
 */
typedef struct CtcatScore {
  uint64_t t;
  double z_ctc;
  double z_embed;
  double z;
  bool valid;
} CtcatScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Creates a detector from an enrollment document on disk.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum CtcatStatus ctcat_detector_new_from_enrollment(const char *path, struct CtcatDetector **out);

/**
 * Creates a detector for `text` with `u` token embeddings of dimension `d`,
 * laid out row-major in `te` (`u * d` doubles). `level` is one of the
 * `CTCAT_LEVEL_*` constants.
 *
 * # Safety
 * `text` must be NUL-terminated, `te` must point to `u * d` doubles and
 * `out` must be a valid pointer.
 */
enum CtcatStatus ctcat_detector_new(const char *text,
                                    uint32_t level,
                                    double lambda,
                                    const double *te,
                                    size_t u,
                                    size_t d,
                                    struct CtcatDetector **out);

/**
 * Pushes one frame: `v` log-posteriors and a `d`-dimensional embedding.
 *
 * # Safety
 * `det` must come from a `ctcat_detector_new*` call; `log_posteriors` and
 * `embedding` must point to `v` and `d` doubles; `out` must be valid.
 */
enum CtcatStatus ctcat_detector_step(struct CtcatDetector *det,
                                     const double *log_posteriors,
                                     size_t v,
                                     const double *embedding,
                                     size_t d,
                                     struct CtcatScore *out);

/**
 * Forgets all frames seen so far.
 *
 * # Safety
 * `det` must come from a `ctcat_detector_new*` call.
 */
enum CtcatStatus ctcat_detector_reset(struct CtcatDetector *det);

/**
 * Number of log-posteriors expected per frame, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or come from a `ctcat_detector_new*` call.
 */
size_t ctcat_detector_vocab_len(const struct CtcatDetector *det);

/**
 * Embedding dimension expected per frame, or 0 for a null handle.
 *
 * # Safety
 * `det` must be null or come from a `ctcat_detector_new*` call.
 */
size_t ctcat_detector_dim(const struct CtcatDetector *det);

/**
 * Releases a detector. Null is ignored.
 *
 * # Safety
 * `det` must be null or come from a `ctcat_detector_new*` call, and must not
 * be used afterwards.
 */
void ctcat_detector_free(struct CtcatDetector *det);

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *ctcat_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ctcat_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CTCAT_H */
