#ifndef AOD_H
#define AOD_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AodStatus {
  AOD_STATUS_OK = 0,
  AOD_STATUS_NULL_POINTER = 1,
  AOD_STATUS_INVALID_ARGUMENT = 2,
  AOD_STATUS_IO = 3,
  AOD_STATUS_PARSE = 4,
  AOD_STATUS_CONFIG = 5,
  AOD_STATUS_NUMERIC = 6,
  AOD_STATUS_MISMATCH = 7,
  AOD_STATUS_BUFFER_TOO_SMALL = 8,
  AOD_STATUS_PANIC = 9,
} AodStatus;

/**
 * A synthetic dataset.
 */
typedef struct AodDataset AodDataset;

/**
 * A trained network loaded from a checkpoint.
 */
typedef struct AodDetector AodDetector;

/**
 * One detection, corners in pixels.
 */
typedef struct AodDetection {
  uint32_t class_id;
  double score;
  double x1;
  double y1;
  double x2;
  double y2;
} AodDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *aod_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *aod_version(void);

/**
 * Intersection over union of two corner boxes `[x1, y1, x2, y2]`; negative
 * when either box is invalid.
 *
 * # Safety
 * `a` and `b` must point to four readable doubles.
 */
double aod_iou(const double *a, const double *b);

/**
 * Loads a checkpoint written by `aod train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AodStatus aod_detector_load(const char *path, struct AodDetector **out);

/**
 * # Safety
 * `det` must come from `aod_detector_load` (or be null) and not be used
 * afterwards.
 */
void aod_detector_free(struct AodDetector *det);

/**
 * Foreground class count `K`, 0 for a null handle.
 *
 * # Safety
 * `det` must be a live handle or null.
 */
uint32_t aod_detector_num_classes(const struct AodDetector *det);

/**
 * Glimpse steps `T`, 0 for a null handle.
 *
 * # Safety
 * `det` must be a live handle or null.
 */
uint32_t aod_detector_steps(const struct AodDetector *det);

/**
 * Detects objects in a `[channels, height, width]` float image (values in
 * `[0, 1]`) given `n_proposals` corner boxes (`4 * n` doubles). Writes up to
 * `capacity` detections and their total number into `out_count`; returns
 * `BUFFER_TOO_SMALL` (with `out_count` set) when they do not fit.
 *
 * # Safety
 * All pointers must be valid for the stated lengths; `out` may be null
 * when `capacity` is 0.
 */
enum AodStatus aod_detect(const struct AodDetector *det,
                          const float *pixels,
                          uintptr_t channels,
                          uintptr_t height,
                          uintptr_t width,
                          const double *proposals,
                          uintptr_t n_proposals,
                          double score_thresh,
                          double nms_thresh,
                          struct AodDetection *out,
                          uintptr_t capacity,
                          uintptr_t *out_count);

/**
 * Generates `n_images` synthetic scenes with the default scene settings
 * apart from the given fields.
 *
 * # Safety
 * `out` must be writable.
 */
enum AodStatus aod_dataset_generate(uint32_t num_classes,
                                    uint32_t image_size,
                                    uint32_t n_images,
                                    uint64_t seed,
                                    bool context_cue,
                                    struct AodDataset **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum AodStatus aod_dataset_load(const char *path, struct AodDataset **out);

/**
 * # Safety
 * `ds` must be a live handle; `path` a NUL-terminated string.
 */
enum AodStatus aod_dataset_save(const struct AodDataset *ds, const char *path);

/**
 * Number of images, 0 for a null handle.
 *
 * # Safety
 * `ds` must be a live handle or null.
 */
uintptr_t aod_dataset_len(const struct AodDataset *ds);

/**
 * Image `index` as `[channels, height, width]`; `pixels` and `proposals`
 * borrow from the handle. Proposals are corner boxes, `4 * n` doubles.
 *
 * # Safety
 * `ds` must be a live handle; every out pointer must be writable.
 */
enum AodStatus aod_dataset_image(const struct AodDataset *ds,
                                 uintptr_t index,
                                 const float **pixels,
                                 uintptr_t *channels,
                                 uintptr_t *height,
                                 uintptr_t *width,
                                 const double **proposals,
                                 uintptr_t *n_proposals);

/**
 * # Safety
 * `ds` must come from this library (or be null) and not be used afterwards.
 */
void aod_dataset_free(struct AodDataset *ds);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AOD_H */
