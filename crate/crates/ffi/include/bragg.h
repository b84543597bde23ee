#ifndef BRAGG_H
#define BRAGG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum BraggStatus {
  BRAGG_STATUS_OK = 0,
  BRAGG_STATUS_NULL_POINTER = 1,
  BRAGG_STATUS_INVALID_ARGUMENT = 2,
  BRAGG_STATUS_IO = 3,
  BRAGG_STATUS_FORMAT = 4,
  BRAGG_STATUS_SHAPE = 5,
  BRAGG_STATUS_NUMERICAL = 6,
  BRAGG_STATUS_PANIC = 7,
} BraggStatus;

typedef enum BraggMethod {
  BRAGG_METHOD_VOIGT_FIT = 0,
  BRAGG_METHOD_BRAGG_NN = 1,
  BRAGG_METHOD_MAXIMA = 2,
} BraggMethod;

/**
 * A stack of detector frames.
 */
typedef struct BraggFrames BraggFrames;

/**
 * Trained (or freshly initialized) network weights.
 */
typedef struct BraggModel BraggModel;

/**
 * Peak list produced by `bragg_localize`.
 */
typedef struct BraggPeaks BraggPeaks;

/**
 * One localized peak. `center_y` is the column, `center_z` the row, both in
 * frame pixels.
 */
typedef struct BraggPeak {
  size_t frame_index;
  double center_y;
  double center_z;
  double amplitude;
} BraggPeak;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the calling thread's most recent failure ("" if none).
 */
const char *bragg_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *bragg_version(void);

/**
 * Loads a `BNNW` weight file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum BraggStatus bragg_model_load(const char *path, struct BraggModel **out);

/**
 * Freshly initialized default-architecture network (patch 11).
 *
 * # Safety
 * `out` must be writable.
 */
enum BraggStatus bragg_model_init(int attention, uint64_t seed, struct BraggModel **out);

/**
 * Writes the model as a `BNNW` file.
 *
 * # Safety
 * `model` must come from this library; `path` must be NUL-terminated.
 */
enum BraggStatus bragg_model_save(const struct BraggModel *model, const char *path);

/**
 * Patch side length the model expects, or 0 for a NULL model.
 *
 * # Safety
 * `model` must be NULL or come from this library.
 */
size_t bragg_model_patch_size(const struct BraggModel *model);

/**
 * # Safety
 * `model` must be NULL or come from this library, and not be used afterwards.
 */
void bragg_model_free(struct BraggModel *model);

/**
 * Predicts `(y, z)` patch-coordinate centers for `n` row-major patches of
 * `patch_size^2` values each; writes `2 n` values to `centers`.
 *
 * # Safety
 * `patches` must hold `n * patch_size^2` doubles and `centers` room for `2 n`.
 */
enum BraggStatus bragg_model_predict(const struct BraggModel *model,
                                     const double *patches,
                                     size_t n,
                                     double *centers);

/**
 * Fits a pseudo-Voigt profile to one `size x size` patch. `params` receives
 * `(bg, amp, eta, mu_y, mu_z, sigma_y, sigma_z)`; `converged` may be NULL.
 *
 * # Safety
 * `values` must hold `size^2` doubles and `params` room for 7.
 */
enum BraggStatus bragg_fit_patch(const double *values, size_t size, double *params, int *converged);

/**
 * Reads a `BFRM` frame stack.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum BraggStatus bragg_frames_read(const char *path, struct BraggFrames **out);

/**
 * Number of frames, or 0 for NULL.
 *
 * # Safety
 * `frames` must be NULL or come from this library.
 */
size_t bragg_frames_count(const struct BraggFrames *frames);

/**
 * Width and height shared by all frames.
 *
 * # Safety
 * `frames` must come from this library; `width` and `height` must be writable.
 */
enum BraggStatus bragg_frames_dims(const struct BraggFrames *frames, size_t *width, size_t *height);

/**
 * Copies frame `index` (row-major counts) into `out`, which holds `len` floats.
 *
 * # Safety
 * `frames` must come from this library; `out` must hold `len` floats.
 */
enum BraggStatus bragg_frames_copy(const struct BraggFrames *frames,
                                   size_t index,
                                   float *out,
                                   size_t len);

/**
 * # Safety
 * `frames` must be NULL or come from this library, and not be used afterwards.
 */
void bragg_frames_free(struct BraggFrames *frames);

/**
 * Segments every frame (robust default threshold), localizes each
 * single-maximum peak with `method`, and returns the peak list. `model` is
 * required for `BRAGG_METHOD_BRAGG_NN` and ignored otherwise; patches use
 * the model's patch size, or `patch_size` for the other methods.
 *
 * # Safety
 * Handles must come from this library; `out` must be writable.
 */
enum BraggStatus bragg_localize(const struct BraggFrames *frames,
                                enum BraggMethod method,
                                const struct BraggModel *model,
                                size_t patch_size,
                                struct BraggPeaks **out);

/**
 * Number of peaks, or 0 for NULL.
 *
 * # Safety
 * `peaks` must be NULL or come from this library.
 */
size_t bragg_peaks_count(const struct BraggPeaks *peaks);

/**
 * Copies peak `index` into `out`.
 *
 * # Safety
 * `peaks` must come from this library; `out` must be writable.
 */
enum BraggStatus bragg_peaks_get(const struct BraggPeaks *peaks,
                                 size_t index,
                                 struct BraggPeak *out);

/**
 * # Safety
 * `peaks` must be NULL or come from this library, and not be used afterwards.
 */
void bragg_peaks_free(struct BraggPeaks *peaks);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BRAGG_H */
