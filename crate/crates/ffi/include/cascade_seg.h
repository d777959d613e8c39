#ifndef CASCADE_SEG_H
#define CASCADE_SEG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum CsStatus {
  CS_STATUS_OK = 0,
  // A required pointer argument was NULL.
  CS_STATUS_NULL_POINTER = 1,
  // An argument was out of range or not valid UTF-8.
  CS_STATUS_INVALID_ARGUMENT = 2,
  // A file could not be read or written.
  CS_STATUS_IO = 3,
  // A file or checkpoint was malformed.
  CS_STATUS_FORMAT = 4,
  // Shapes or configuration values were inconsistent.
  CS_STATUS_CONFIG = 5,
  // The channels of a case do not match the model.
  CS_STATUS_CHANNEL = 6,
  // A metric is undefined for the given masks.
  CS_STATUS_EVALUATION = 7,
  // The library panicked; the handle arguments should be discarded.
  CS_STATUS_PANIC = 8,
} CsStatus;

// One multi-channel case, optionally with a lesion mask.
typedef struct CsCase CsCase;

// A binary mask.
typedef struct CsMask CsMask;

// A trained two-network cascade with its test parameters.
typedef struct CsModel CsModel;

// A voxel-wise lesion probability map.
typedef struct CsProbMap CsProbMap;

// Per-case evaluation of a segmentation against a ground-truth mask.
typedef struct CsEvalReport {
  // Absolute volume difference in percent of the ground-truth volume.
  double vd;
  // Region-level true positive rate, percent.
  double tpr;
  // Region-level false positive rate, percent.
  double fpr;
  // Dice similarity coefficient, percent.
  double dsc;
  // Positive predictive value, percent.
  double ppv;
  double seg_vol_ml;
  double gt_vol_ml;
  uint64_t voxel_tp;
  uint64_t voxel_fp;
  uint64_t voxel_fn;
  uint64_t region_tp;
  uint64_t region_fn;
  uint64_t region_fp;
} CsEvalReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *cs_version(void);

// Message of the last failed call on this thread, or NULL when no call has
// failed yet. The pointer stays valid until the next failing call on the
// same thread.
const char *cs_last_error(void);

// Loads a model directory written by `cascade-seg train`.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be writable.
enum CsStatus cs_model_load(const char *dir, struct CsModel **out);

// Test parameters stored with the model.
//
// # Safety
// `model` must be a live handle; `t_bin` and `l_min` must be writable.
enum CsStatus cs_model_params(const struct CsModel *model, double *t_bin, size_t *l_min);

// Number of input channels the model expects.
//
// # Safety
// `model` must be a live handle or NULL (which yields 0).
size_t cs_model_channel_count(const struct CsModel *model);

// Name of input channel `index` of the model, or NULL when out of range.
// The string is owned by the caller and released with [`cs_string_free`].
//
// # Safety
// `model` must be a live handle or NULL.
char *cs_model_channel_name(const struct CsModel *model, size_t index);

// # Safety
// `model` must be NULL or a handle that has not been freed yet.
void cs_model_free(struct CsModel *model);

// # Safety
// `s` must be NULL or a string returned by this library and not freed yet.
void cs_string_free(char *s);

// Builds a case from `n_channels` named intensity volumes of `dims`
// voxels each. `voxel_size` (3 floats, mm) may be NULL for 1 mm voxels;
// `mask` (one 0/1 byte per voxel) may be NULL. The data is copied.
//
// # Safety
// `case_id` and every `names[i]` must be NUL-terminated strings, `dims`
// must point to 3 values, each `data[i]` to `dims[0]*dims[1]*dims[2]`
// floats, and `out` must be writable.
enum CsStatus cs_case_new(const char *case_id,
                          const size_t *dims,
                          const float *voxel_size,
                          const char *const *names,
                          const float *const *data,
                          size_t n_channels,
                          const uint8_t *mask,
                          struct CsCase **out);

// Generates synthetic case `index` of the phantom cohort with `seed`:
// a cube of `edge` voxels with T1 and FLAIR channels and a lesion mask.
//
// # Safety
// `out` must be writable.
enum CsStatus cs_phantom_case(size_t edge, uint64_t seed, size_t index, struct CsCase **out);

// Copies the lesion mask of a case into a new handle.
//
// # Safety
// `case` must be a live handle; `out` must be writable.
enum CsStatus cs_case_mask(const struct CsCase *case_, struct CsMask **out);

// Number of voxels of a case, or 0 for NULL.
//
// # Safety
// `case` must be a live handle or NULL.
size_t cs_case_len(const struct CsCase *case_);

// # Safety
// `case` must be NULL or a handle that has not been freed yet.
void cs_case_free(struct CsCase *case_);

// Runs both cascade stages on a case (raw intensities; every channel is
// z-score normalized first) and returns the final probability map.
//
// # Safety
// `model` and `case` must be live handles; `out` must be writable.
enum CsStatus cs_predict(const struct CsModel *model,
                         const struct CsCase *case_,
                         struct CsProbMap **out);

// Wraps caller-supplied probabilities (each in [0, 1]); the data is copied.
//
// # Safety
// `dims` must point to 3 values, `data` to `dims[0]*dims[1]*dims[2]`
// floats, `voxel_size` to 3 floats or NULL; `out` must be writable.
enum CsStatus cs_probmap_new(const size_t *dims,
                             const float *voxel_size,
                             const float *data,
                             struct CsProbMap **out);

// Number of voxels of a map, or 0 for NULL.
//
// # Safety
// `map` must be a live handle or NULL.
size_t cs_probmap_len(const struct CsProbMap *map);

// Borrowed pointer to the probabilities, valid while the handle lives.
//
// # Safety
// `map` must be a live handle or NULL (which yields NULL).
const float *cs_probmap_data(const struct CsProbMap *map);

// # Safety
// `map` must be NULL or a handle that has not been freed yet.
void cs_probmap_free(struct CsProbMap *map);

// Thresholds a map at `t_bin` (probability >= `t_bin`) and removes
// 26-connected regions smaller than `l_min` voxels.
//
// # Safety
// `map` must be a live handle; `out` must be writable.
enum CsStatus cs_segment(const struct CsProbMap *map,
                         double t_bin,
                         size_t l_min,
                         struct CsMask **out);

// Wraps a caller-supplied 0/1 mask; the data is copied.
//
// # Safety
// `dims` must point to 3 values, `data` to `dims[0]*dims[1]*dims[2]`
// bytes, `voxel_size` to 3 floats or NULL; `out` must be writable.
enum CsStatus cs_mask_new(const size_t *dims,
                          const float *voxel_size,
                          const uint8_t *data,
                          struct CsMask **out);

// Number of voxels of a mask, or 0 for NULL.
//
// # Safety
// `mask` must be a live handle or NULL.
size_t cs_mask_len(const struct CsMask *mask);

// Number of foreground voxels, or 0 for NULL.
//
// # Safety
// `mask` must be a live handle or NULL.
size_t cs_mask_count(const struct CsMask *mask);

// Borrowed pointer to the 0/1 bytes, valid while the handle lives.
//
// # Safety
// `mask` must be a live handle or NULL (which yields NULL).
const uint8_t *cs_mask_data(const struct CsMask *mask);

// # Safety
// `mask` must be NULL or a handle that has not been freed yet.
void cs_mask_free(struct CsMask *mask);

// Evaluates `seg` against `gt`. Regions count as detected when they share
// at least one voxel and the shared voxels make up at least `min_overlap`
// (0..=1) of the region. Undefined rates are reported as 0.
//
// # Safety
// `seg` and `gt` must be live handles; `out` must be writable.
enum CsStatus cs_evaluate(const struct CsMask *seg,
                          const struct CsMask *gt,
                          double min_overlap,
                          struct CsEvalReport *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CASCADE_SEG_H */
