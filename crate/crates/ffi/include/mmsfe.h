#ifndef MMSFE_H
#define MMSFE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes.
typedef enum MmsfeStatus {
  MMSFE_STATUS_OK = 0,
  MMSFE_STATUS_NULL_POINTER = 1,
  MMSFE_STATUS_INVALID_ARGUMENT = 2,
  MMSFE_STATUS_IO = 3,
  MMSFE_STATUS_FORMAT = 4,
  MMSFE_STATUS_INTERNAL = 5,
} MmsfeStatus;

// Opaque trained model.
typedef struct MmsfeModel MmsfeModel;

// Corner-form box in pixel coordinates.
typedef struct MmsfeBox {
  double x1;
  double y1;
  double x2;
  double y2;
} MmsfeBox;

typedef struct MmsfeDetection {
  struct MmsfeBox bbox;
  double score;
  // 0 = NMIBC, 1 = MIBC.
  uint32_t class_id;
} MmsfeDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failure on this thread, or NULL. Valid until
// the next call into this library from the same thread.
const char *mmsfe_last_error(void);

// Loads a checkpoint written by `mmsfe train`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MmsfeStatus mmsfe_model_load(const char *path, struct MmsfeModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`mmsfe_model_load`] and not be used afterwards.
void mmsfe_model_free(struct MmsfeModel *model);

// Square input side the model was trained on.
//
// # Safety
// `model` and `out` must be valid pointers.
enum MmsfeStatus mmsfe_model_image_size(const struct MmsfeModel *model, size_t *out);

// Detects tumours in a row-major `height x width` image with values in
// `[0, 1]`. At most `capacity` detections are written to `out` in
// descending score order; `out_count` receives the total number found.
//
// # Safety
// `pixels` must hold `height * width` values and `out` room for `capacity`
// entries (`out` may be NULL when `capacity` is 0).
enum MmsfeStatus mmsfe_model_detect(const struct MmsfeModel *model,
                                    const double *pixels,
                                    size_t height,
                                    size_t width,
                                    struct MmsfeDetection *out,
                                    size_t capacity,
                                    size_t *out_count);

// Intersection over union of two boxes.
//
// # Safety
// `out` must be a valid pointer.
enum MmsfeStatus mmsfe_iou(struct MmsfeBox a, struct MmsfeBox b, double *out);

// Class-wise greedy NMS. Writes kept indices (into `dets`) to `keep` in
// keep order and their number to `kept`. `keep` must hold `n` entries.
//
// # Safety
// `dets` must hold `n` entries and `keep` room for `n` indices.
enum MmsfeStatus mmsfe_nms(const struct MmsfeDetection *dets,
                           size_t n,
                           double iou_threshold,
                           size_t *keep,
                           size_t *kept);

// Renders the deterministic phantom scene for `seed` at `size x size`
// with geometry scaled to the image size. `pixels` receives `size * size` values,
// `gt` the tumour box and `class_id` its label.
//
// # Safety
// `pixels` must have room for `capacity` values; `gt` and `class_id` must
// be valid pointers.
enum MmsfeStatus mmsfe_phantom_scene(uint64_t seed,
                                     size_t size,
                                     double *pixels,
                                     size_t capacity,
                                     struct MmsfeBox *gt,
                                     uint32_t *class_id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MMSFE_H */
