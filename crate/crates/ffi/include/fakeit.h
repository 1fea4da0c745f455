#ifndef FAKEIT_H
#define FAKEIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  FK_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  FK_STATUS_NULL_POINTER = 1,
  /**
   * A string was not UTF-8, a size was inconsistent, or a label was
   * out of range.
   */
  FK_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The file could not be read.
   */
  FK_STATUS_IO = 3,
  /**
   * The file was read but is not a valid model bundle.
   */
  FK_STATUS_FORMAT = 4,
  /**
   * The model cannot serve the request (for example a fused model
   * called without an image).
   */
  FK_STATUS_CONTRACT = 5,
  /**
   * A computation produced a non-finite value or failed internally.
   */
  FK_STATUS_COMPUTE = 6,
  /**
   * The library panicked; the handle involved should be freed.
   */
  FK_STATUS_PANIC = 7,
} FkStatus;

/**
 * Which inputs a model consumes.
 */
typedef enum {
  FK_MODE_TEXT_ONLY = 0,
  FK_MODE_IMAGE_ONLY = 1,
  FK_MODE_FUSED = 2,
} FkMode;

/**
 * Opaque model handle.
 */
typedef struct FkModel FkModel;

typedef struct {
  /**
   * 0 = fake, 1 = genuine.
   */
  uint32_t label;
  double p_fake;
  double p_genuine;
} FkPrediction;

/**
 * Binary metrics with genuine (label 1) as the positive class.
 */
typedef struct {
  uint64_t tp;
  uint64_t fp;
  uint64_t fn_;
  uint64_t tn;
  double accuracy;
  double precision;
  double recall;
  double f1;
  /**
   * Nonzero when a ratio had a zero denominator and was reported as 0.
   */
  uint8_t degenerate;
} FkMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *fk_version(void);

/**
 * Message for the most recent failure on this thread, or null if there
 * has been none. The pointer stays valid until the next failing call on
 * the same thread.
 */
const char *fk_last_error_message(void);

/**
 * Loads a model bundle. On success `*out` receives a handle that must be
 * released with [`fk_model_free`]; on failure it is set to null.
 *
 * # Safety
 * `path` must be null or a NUL-terminated string; `out` must be null or
 * point to writable storage for one pointer.
 */
FkStatus fk_model_load(const char *path, FkModel **out);

/**
 * Releases a handle from [`fk_model_load`]. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void fk_model_free(FkModel *model);

/**
 * # Safety
 * `model` must be null or a live handle; `out` null or writable.
 */
FkStatus fk_model_mode(const FkModel *model, FkMode *out);

/**
 * Classifies one review. `text` may be null for image-only models;
 * `rgb` may be null for text-only models, otherwise it holds
 * `width * height * 3` bytes of row-major RGB.
 *
 * # Safety
 * Pointers must be null or valid for the sizes described above.
 */
FkStatus fk_model_predict(const FkModel *model,
                          const char *text,
                          const uint8_t *rgb,
                          size_t width,
                          size_t height,
                          FkPrediction *out);

/**
 * Confusion counts and metrics for `n` predicted and gold labels (each 0
 * or 1).
 *
 * # Safety
 * `preds` and `golds` must each point to `n` values (or be null when `n`
 * is 0); `out` must be writable.
 */
FkStatus fk_metrics_compute(const uint32_t *preds, const uint32_t *golds, size_t n, FkMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FAKEIT_H */
