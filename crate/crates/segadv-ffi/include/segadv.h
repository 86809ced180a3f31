/* C interface to the segadv attack/defense toolkit. */

#ifndef SEGADV_H
#define SEGADV_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status of a fallible call.
 */
typedef enum {
  SEGADV_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SEGADV_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument value was rejected (bad size, bad range, bad config).
   */
  SEGADV_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The underlying file could not be read or written.
   */
  SEGADV_STATUS_IO_ERROR = 3,
  /**
   * A file was readable but not in the expected format.
   */
  SEGADV_STATUS_FORMAT_ERROR = 4,
  /**
   * The computation hit a numerical failure (non-finite loss, degenerate
   * gradient, budget violation).
   */
  SEGADV_STATUS_NUMERICAL_ERROR = 5,
  /**
   * A panic was caught at the boundary; the handle state is unspecified.
   */
  SEGADV_STATUS_INTERNAL_ERROR = 6,
} SegadvStatus;

typedef struct SegadvImage SegadvImage;

typedef struct SegadvModel SegadvModel;

typedef struct SegadvPatchDb SegadvPatchDb;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread. The pointer stays
 * valid until the next failing call on the same thread.
 */
const char *segadv_last_error(void);

/**
 * Load a model checkpoint. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
SegadvModel *segadv_model_load(const char *path);

/**
 * # Safety
 * `model` must come from this library and not have been freed.
 */
void segadv_model_free(SegadvModel *model);

/**
 * Number of output classes, or 0 when `model` is null.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
uint32_t segadv_model_num_classes(const SegadvModel *model);

/**
 * Wrap a row-major H x W x C 8-bit buffer (copied). Returns null on failure.
 *
 * # Safety
 * `data` must point to `height * width * channels` readable bytes.
 */
SegadvImage *segadv_image_create(uintptr_t height,
                                 uintptr_t width,
                                 uintptr_t channels,
                                 const uint8_t *data);

/**
 * # Safety
 * `image` must come from this library and not have been freed.
 */
void segadv_image_free(SegadvImage *image);

/**
 * # Safety
 * `image` must be a live handle or null.
 */
uintptr_t segadv_image_height(const SegadvImage *image);

/**
 * # Safety
 * `image` must be a live handle or null.
 */
uintptr_t segadv_image_width(const SegadvImage *image);

/**
 * # Safety
 * `image` must be a live handle or null.
 */
uintptr_t segadv_image_channels(const SegadvImage *image);

/**
 * Copy the pixel buffer into `out` (`out_len` must be at least H*W*C).
 *
 * # Safety
 * `image` must be a live handle; `out` must point to `out_len` writable bytes.
 */
SegadvStatus segadv_image_copy_data(const SegadvImage *image, uint8_t *out, uintptr_t out_len);

/**
 * Per-pixel class prediction; writes H*W class ids into `out`.
 *
 * # Safety
 * `model` and `image` must be live handles; `out` must point to `out_len`
 * writable bytes.
 */
SegadvStatus segadv_predict(const SegadvModel *model,
                            const SegadvImage *image,
                            uint8_t *out,
                            uintptr_t out_len);

/**
 * Single signed-gradient step against the model's own prediction.
 * Returns the adversarial image, or null on failure.
 *
 * # Safety
 * `model` and `image` must be live handles.
 */
SegadvImage *segadv_attack_fgsm(const SegadvModel *model,
                                const SegadvImage *image,
                                double lambda,
                                double epsilon);

/**
 * Iterated descent toward the least-likely class of the clean prediction.
 * `iterations == 0` selects the default budget floor(min(eps+4, 1.25*eps)).
 *
 * # Safety
 * `model` and `image` must be live handles.
 */
SegadvImage *segadv_attack_least_likely(const SegadvModel *model,
                                        const SegadvImage *image,
                                        double lambda,
                                        double epsilon,
                                        uintptr_t iterations);

/**
 * Targeted removal of one class: every pixel the model predicts as
 * `objective` is pushed toward its spatially nearest other class.
 *
 * # Safety
 * `model` and `image` must be live handles.
 */
SegadvImage *segadv_attack_remove_class(const SegadvModel *model,
                                        const SegadvImage *image,
                                        uint8_t objective,
                                        double lambda,
                                        double epsilon,
                                        uintptr_t iterations);

/**
 * Non-local means denoising. `h <= 0` selects the noise-adaptive filtering
 * strength; `h > 0` fixes it. Returns null on failure.
 *
 * # Safety
 * `image` must be a live handle.
 */
SegadvImage *segadv_nlm_denoise(const SegadvImage *image, double h);

/**
 * Load a quilting patch database. Returns null on failure.
 *
 * # Safety
 * `path` must be a valid NUL-terminated string.
 */
SegadvPatchDb *segadv_patch_db_load(const char *path);

/**
 * # Safety
 * `db` must come from this library and not have been freed.
 */
void segadv_patch_db_free(SegadvPatchDb *db);

/**
 * Replace every tile of the image by its nearest database patch.
 * Returns null on failure.
 *
 * # Safety
 * `image` and `db` must be live handles.
 */
SegadvImage *segadv_quilt(const SegadvImage *image, const SegadvPatchDb *db);

/**
 * Mean intersection-over-union between two flat H*W class-id buffers.
 * Classes absent from both are excluded from the mean.
 *
 * # Safety
 * `pred` and `truth` must point to `len` readable bytes; `out` must be a
 * valid pointer.
 */
SegadvStatus segadv_miou(const uint8_t *pred,
                         const uint8_t *truth,
                         uintptr_t len,
                         uint32_t n_classes,
                         double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGADV_H */
