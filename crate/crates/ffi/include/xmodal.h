#ifndef XMODAL_H
#define XMODAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum XmModality {
  XM_MODALITY_WL = 0,
  XM_MODALITY_NBI = 1,
} XmModality;

/**
 * Status codes; the non-zero values match the `xmodal` exit codes.
 */
typedef enum XmStatus {
  XM_STATUS_OK = 0,
  /**
   * Bad argument: null pointer, wrong buffer length, pruned model asked
   * for alignment outputs.
   */
  XM_STATUS_USAGE = 1,
  /**
   * Unreadable or malformed checkpoint.
   */
  XM_STATUS_DATA = 2,
  /**
   * Shape or numerical failure inside the model, or a caught panic.
   */
  XM_STATUS_NUMERICAL = 3,
} XmStatus;

/**
 * Opaque handle to a loaded model.
 */
typedef struct XmModel XmModel;

/**
 * Geometry of a loaded model.
 */
typedef struct XmModelInfo {
  size_t image_size;
  size_t patch_size;
  size_t embed_dim;
  size_t heads;
  size_t layers;
  size_t num_classes;
  size_t num_patches;
  /**
   * 1 when the alignment parameters were stripped.
   */
  uint8_t pruned;
} XmModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *xm_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *xm_version(void);

/**
 * Loads a full or pruned checkpoint. On success `*out` owns a handle to
 * release with [`xm_model_free`].
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum XmStatus xm_model_load(const char *path, struct XmModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must be null or a handle from [`xm_model_load`] not yet freed.
 */
void xm_model_free(struct XmModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum XmStatus xm_model_info(const struct XmModel *model, struct XmModelInfo *out);

/**
 * Class logits of one WL image; `logits_len` must equal `num_classes`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum XmStatus xm_model_predict(const struct XmModel *model,
                               const double *pixels,
                               size_t len,
                               double *logits,
                               size_t logits_len);

/**
 * Normed class token of one WL image; `out_len` must equal `embed_dim`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum XmStatus xm_model_class_token(const struct XmModel *model,
                                   const double *pixels,
                                   size_t len,
                                   double *out,
                                   size_t out_len);

/**
 * Last-layer class-to-patch attention averaged over heads, raster patch
 * order; `out_len` must equal `num_patches`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum XmStatus xm_model_attention(const struct XmModel *model,
                                 const double *pixels,
                                 size_t len,
                                 double *out,
                                 size_t out_len);

/**
 * Alignment response map of one image; fails with `Usage` on a pruned
 * model. `out_len` must equal `num_patches`.
 *
 * # Safety
 * Buffers must hold the stated number of doubles.
 */
enum XmStatus xm_model_response_map(const struct XmModel *model,
                                    const double *pixels,
                                    size_t len,
                                    enum XmModality modality,
                                    double *out,
                                    size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XMODAL_H */
