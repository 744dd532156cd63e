#ifndef GSEG_H
#define GSEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GsegStatus {
  GSEG_STATUS_OK = 0,
  GSEG_STATUS_NULL_POINTER = 1,
  GSEG_STATUS_INVALID_ARGUMENT = 2,
  GSEG_STATUS_IO = 3,
  GSEG_STATUS_NIFTI = 4,
  GSEG_STATUS_CHECKPOINT = 5,
  GSEG_STATUS_SHAPE = 6,
  GSEG_STATUS_MODEL = 7,
  GSEG_STATUS_BUFFER_TOO_SMALL = 8,
  GSEG_STATUS_PANIC = 9,
} GsegStatus;

// A trained network restored from a checkpoint.
typedef struct GsegModel GsegModel;

// A NIfTI-1 volume.
typedef struct GsegVolume GsegVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gseg_version(void);

// Length in bytes of the last error message on this thread, without the
// terminating NUL; 0 when the last call succeeded.
size_t gseg_last_error_length(void);

// Copies the last error message into `buf` (NUL-terminated).
//
// # Safety
// `buf` must be valid for `cap` bytes of writes.
enum GsegStatus gseg_last_error_message(char *buf, size_t cap);

// Restores a model from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GsegStatus gseg_model_load(const char *path, struct GsegModel **out);

// # Safety
// `model` must come from [`gseg_model_load`] and not be used afterwards.
void gseg_model_free(struct GsegModel *model);

// Number of spatial axes the model expects (2 or 3).
//
// # Safety
// `model` must be a live handle or null.
size_t gseg_model_rank(const struct GsegModel *model);

// Segments one channels-last image `x` of shape `[dims.., 4]` (modalities
// flair, t1, t1ce, t2) into `out`, one label in {0, 1, 2, 4} per voxel.
//
// # Safety
// `x` must hold `prod(dims) * 4` floats, `dims` `rank` entries and `out`
// `out_len` bytes.
enum GsegStatus gseg_model_segment(const struct GsegModel *model,
                                   const float *x,
                                   const size_t *dims,
                                   size_t rank,
                                   uint8_t *out,
                                   size_t out_len);

// Reads a `.nii` file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GsegStatus gseg_volume_read(const char *path, struct GsegVolume **out);

// Builds a uint8 label volume from row-major labels (last axis fastest).
//
// # Safety
// `labels` must hold `prod(dims)` bytes and `dims` `rank` entries.
enum GsegStatus gseg_volume_from_labels(const uint8_t *labels,
                                        const size_t *dims,
                                        size_t rank,
                                        struct GsegVolume **out);

// Writes a volume as little-endian NIfTI-1.
//
// # Safety
// `volume` must be a live handle and `path` a NUL-terminated string.
enum GsegStatus gseg_volume_write(const struct GsegVolume *volume, const char *path);

// Number of axes of a volume; 0 for a null handle.
//
// # Safety
// `volume` must be a live handle or null.
size_t gseg_volume_rank(const struct GsegVolume *volume);

// Copies the extents of each axis into `dims`.
//
// # Safety
// `volume` must be a live handle and `dims` valid for `cap` writes.
enum GsegStatus gseg_volume_dims(const struct GsegVolume *volume, size_t *dims, size_t cap);

// Copies the voxels, scaled and converted to float, in row-major order.
//
// # Safety
// `volume` must be a live handle and `out` valid for `len` floats.
enum GsegStatus gseg_volume_to_f32(const struct GsegVolume *volume, float *out, size_t len);

// # Safety
// `volume` must come from this library and not be used afterwards.
void gseg_volume_free(struct GsegVolume *volume);

// Writes `count` synthetic cases of `size`^3 voxels under `dir`.
//
// # Safety
// `dir` must be a NUL-terminated string.
enum GsegStatus gseg_phantom_write(const char *dir, size_t count, size_t size, uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GSEG_H */
