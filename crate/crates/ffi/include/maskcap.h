#ifndef MASKCAP_H
#define MASKCAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum MaskcapStatus {
  MASKCAP_STATUS_OK = 0,
  MASKCAP_STATUS_NULL_POINTER = 1,
  MASKCAP_STATUS_INVALID_ARGUMENT = 2,
  MASKCAP_STATUS_BUFFER_TOO_SMALL = 3,
  MASKCAP_STATUS_IO = 4,
  MASKCAP_STATUS_PARSE = 5,
  MASKCAP_STATUS_SCHEMA = 6,
  MASKCAP_STATUS_CHECKPOINT = 7,
  MASKCAP_STATUS_DIMENSION = 8,
  MASKCAP_STATUS_DOMAIN = 9,
  MASKCAP_STATUS_NON_FINITE = 10,
  MASKCAP_STATUS_LOOKUP = 11,
  MASKCAP_STATUS_CONFIG = 12,
  MASKCAP_STATUS_PANIC = 13,
} MaskcapStatus;

/**
 * A loaded dataset split.
 */
typedef struct MaskcapDataset MaskcapDataset;

/**
 * A loaded checkpoint.
 */
typedef struct MaskcapModel MaskcapModel;

/**
 * Options for caption generation. `mask` may be NULL with `mask_len` 0, in
 * which case a masked model uses its predicted mask.
 */
typedef struct MaskcapCaptionOptions {
  size_t beam;
  size_t max_len;
  const double *mask;
  size_t mask_len;
} MaskcapCaptionOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *maskcap_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MaskcapStatus maskcap_model_load(const char *path, struct MaskcapModel **out);

/**
 * # Safety
 * `model` must come from [`maskcap_model_load`] and not be freed twice. NULL is ignored.
 */
void maskcap_model_free(struct MaskcapModel *model);

/**
 * Model dimensions. Any output pointer may be NULL.
 *
 * # Safety
 * `model` must be a live handle; non-NULL outputs must be writable.
 */
enum MaskcapStatus maskcap_model_dims(const struct MaskcapModel *model,
                                      size_t *slots,
                                      size_t *entity_dim,
                                      size_t *global_dim,
                                      size_t *vocab);

/**
 * 1 when the model was trained with entity masks, 0 otherwise.
 *
 * # Safety
 * `model` must be a live handle or NULL.
 */
int32_t maskcap_model_is_masked(const struct MaskcapModel *model);

/**
 * Loads a dataset split file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum MaskcapStatus maskcap_dataset_load(const char *path, struct MaskcapDataset **out);

/**
 * # Safety
 * `dataset` must come from [`maskcap_dataset_load`] and not be freed twice. NULL is ignored.
 */
void maskcap_dataset_free(struct MaskcapDataset *dataset);

/**
 * Number of samples, 0 for NULL.
 *
 * # Safety
 * `dataset` must be a live handle or NULL.
 */
size_t maskcap_dataset_len(const struct MaskcapDataset *dataset);

/**
 * Id of the sample at `index` (file order).
 *
 * # Safety
 * `dataset` must be a live handle; `id` must be writable.
 */
enum MaskcapStatus maskcap_dataset_sample_id(const struct MaskcapDataset *dataset,
                                             size_t index,
                                             uint64_t *id);

/**
 * Predicted per-slot mask of a dataset sample. Writes `*out_len` values
 * into `out`; on [`MaskcapStatus::BufferTooSmall`] only `*out_len` is set.
 *
 * # Safety
 * Handles must be live; `out` must hold `cap` values; `out_len` must be writable.
 */
enum MaskcapStatus maskcap_predict_mask(const struct MaskcapModel *model,
                                        const struct MaskcapDataset *dataset,
                                        uint64_t sample_id,
                                        double *out,
                                        size_t cap,
                                        size_t *out_len);

/**
 * Like [`maskcap_predict_mask`] for raw features: `entities` is row-major
 * `slots × entity_dim`, `global` has `global_dim` values.
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum MaskcapStatus maskcap_predict_mask_features(const struct MaskcapModel *model,
                                                 const double *entities,
                                                 size_t slots,
                                                 size_t entity_dim,
                                                 const double *global,
                                                 size_t global_dim,
                                                 double *out,
                                                 size_t cap,
                                                 size_t *out_len);

/**
 * Beam 5, at most 20 tokens, no mask override.
 */
struct MaskcapCaptionOptions maskcap_caption_options_default(void);

/**
 * Captions a dataset sample into `buf` as space-separated tokens with a
 * trailing NUL. `*needed` (if non-NULL) receives the byte count including
 * the NUL, also when the buffer is too small.
 *
 * # Safety
 * Handles must be live; `opts` must be valid; `buf` must hold `cap` bytes.
 */
enum MaskcapStatus maskcap_caption(const struct MaskcapModel *model,
                                   const struct MaskcapDataset *dataset,
                                   uint64_t sample_id,
                                   const struct MaskcapCaptionOptions *opts,
                                   char *buf,
                                   size_t cap,
                                   size_t *needed,
                                   double *logp);

/**
 * [`maskcap_caption`] for raw features laid out as in
 * [`maskcap_predict_mask_features`].
 *
 * # Safety
 * Pointers must reference arrays of the stated sizes.
 */
enum MaskcapStatus maskcap_caption_features(const struct MaskcapModel *model,
                                            const double *entities,
                                            size_t slots,
                                            size_t entity_dim,
                                            const double *global,
                                            size_t global_dim,
                                            const struct MaskcapCaptionOptions *opts,
                                            char *buf,
                                            size_t cap,
                                            size_t *needed,
                                            double *logp);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MASKCAP_H */
