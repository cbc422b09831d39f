/* C ABI for the rgbt-det RGB-thermal object detector. */

#ifndef RGBT_DET_H
#define RGBT_DET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Call outcome; anything but `Ok` leaves a message in `rgbt_last_error`.
 */
typedef enum RgbtStatus {
  RGBT_STATUS_OK = 0,
  RGBT_STATUS_NULL_POINTER = 1,
  RGBT_STATUS_INVALID_ARGUMENT = 2,
  RGBT_STATUS_IO_ERROR = 3,
  RGBT_STATUS_BAD_CHECKPOINT = 4,
  RGBT_STATUS_SHAPE_MISMATCH = 5,
  RGBT_STATUS_INTERNAL = 6,
} RgbtStatus;

/**
 * Opaque detector handle.
 */
typedef struct RgbtDetector RgbtDetector;

/**
 * One detection in pixel coordinates of the input image.
 */
typedef struct RgbtDetection {
  int32_t class_id;
  float score;
  float x1;
  float y1;
  float x2;
  float y2;
} RgbtDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *rgbt_last_error(void);

/**
 * ABI version of this library.
 */
uint32_t rgbt_abi_version(void);

/**
 * Loads a detector from a checkpoint file produced by the `rgbt-det` CLI.
 *
 * # Safety
 * `checkpoint_path` must be a NUL-terminated string; `out` must point to
 * writable storage for one pointer. A handle returned here must be released
 * with [`rgbt_detector_free`].
 */
enum RgbtStatus rgbt_detector_load(const char *checkpoint_path, struct RgbtDetector **out);

/**
 * Releases a detector handle; a null pointer is a no-op.
 *
 * # Safety
 * `detector` must have come from [`rgbt_detector_load`] and not been freed.
 */
void rgbt_detector_free(struct RgbtDetector *detector);

/**
 * Expected input image height/width in pixels.
 *
 * # Safety
 * All pointers must be valid; see [`rgbt_detector_load`].
 */
enum RgbtStatus rgbt_detector_input_size(const struct RgbtDetector *detector,
                                         uint32_t *height,
                                         uint32_t *width);

/**
 * Sets the decision-fusion branch weights (fusion, visible, thermal).
 *
 * # Safety
 * `detector` must be a live handle from [`rgbt_detector_load`].
 */
enum RgbtStatus rgbt_detector_set_fusion_weights(struct RgbtDetector *detector,
                                                 double fusion,
                                                 double visible,
                                                 double thermal);

/**
 * Sets the detection score threshold and the NMS IoU threshold.
 *
 * # Safety
 * `detector` must be a live handle from [`rgbt_detector_load`].
 */
enum RgbtStatus rgbt_detector_set_thresholds(struct RgbtDetector *detector,
                                             double score_thresh,
                                             double nms_iou);

/**
 * Runs decision-fused inference on one co-registered pair.
 *
 * `visible_rgb` is row-major interleaved RGB (`height*width*3` bytes),
 * `thermal_gray` row-major grayscale (`height*width` bytes); both must match
 * the detector's input size exactly. On success `*out_detections` holds
 * `*out_len` entries to be released with [`rgbt_detections_free`].
 *
 * # Safety
 * Buffer pointers must reference at least the stated number of bytes;
 * `out_detections` and `out_len` must be writable.
 */
enum RgbtStatus rgbt_detector_predict(const struct RgbtDetector *detector,
                                      const uint8_t *visible_rgb,
                                      const uint8_t *thermal_gray,
                                      uint32_t height,
                                      uint32_t width,
                                      struct RgbtDetection **out_detections,
                                      size_t *out_len);

/**
 * Releases a detection array returned by [`rgbt_detector_predict`].
 *
 * # Safety
 * `detections`/`len` must be exactly what a successful predict call
 * produced; passing anything else is undefined behavior.
 */
void rgbt_detections_free(struct RgbtDetection *detections, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RGBT_DET_H */
