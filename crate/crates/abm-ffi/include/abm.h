#ifndef ABM_FFI_H
#define ABM_FFI_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Merge algorithm selector.
 */
typedef enum AbmMergeMethod {
  ABM_MERGE_METHOD_AVERAGE = 0,
  ABM_MERGE_METHOD_TSVM = 1,
  ABM_MERGE_METHOD_WUDI = 2,
} AbmMergeMethod;

/**
 * Status codes shared with the CLI's exit-code taxonomy.
 */
typedef enum AbmStatus {
  ABM_STATUS_OK = 0,
  ABM_STATUS_SHAPE_MISMATCH = 2,
  ABM_STATUS_IO = 3,
  ABM_STATUS_NUMERIC = 4,
  ABM_STATUS_USAGE = 6,
} AbmStatus;

/**
 * Opaque parameter-map handle.
 */
typedef struct AbmModel AbmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy of the most recent error message for this thread; always
 * NUL-terminated, truncated to `len`.
 */
uintptr_t abm_last_error_message(char *buf, uintptr_t len);

/**
 * Read an ABM-CKPT v1 file into a new model handle.
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must point to writable storage.
 */
enum AbmStatus abm_checkpoint_read(const char *path, struct AbmModel **out);

/**
 * Serialize a model handle to an ABM-CKPT v1 file.
 *
 * # Safety
 * `model` must be a live handle from this library; `path` NUL-terminated.
 */
enum AbmStatus abm_checkpoint_write(const struct AbmModel *model, const char *path);

/**
 * Release a model handle.
 *
 * # Safety
 * `model` must have come from this library and not be freed twice.
 */
void abm_model_free(struct AbmModel *model);

/**
 * Number of named tensors in the model.
 *
 * # Safety
 * `model` must be a live handle.
 */
uintptr_t abm_model_num_tensors(const struct AbmModel *model);

/**
 * Total number of scalar parameters.
 *
 * # Safety
 * `model` must be a live handle.
 */
uintptr_t abm_model_numel(const struct AbmModel *model);

/**
 * Copy the name of tensor `index` (lexicographic order) into `buf`.
 * Returns the name's byte length, or 0 when out of range.
 *
 * # Safety
 * `model` live; `buf` writable for `len` bytes.
 */
uintptr_t abm_model_tensor_name(const struct AbmModel *model,
                                uintptr_t index,
                                char *buf,
                                uintptr_t len);

/**
 * Copy a named tensor's data into `out` (row-major f32). Writes the
 * element count to `out_numel` when non-null.
 *
 * # Safety
 * `model` live; `name` NUL-terminated; `out` writable for `capacity`.
 */
enum AbmStatus abm_model_tensor_data(const struct AbmModel *model,
                                     const char *name,
                                     float *out,
                                     uintptr_t capacity,
                                     uintptr_t *out_numel);

/**
 * Merge `n_experts` expert models over a base model. `iters` and `lr`
 * follow the reconcile-stage recipe; pass 0 / 0.0 for the defaults
 * (1000 iterations, 1e-5).
 *
 * # Safety
 * All handles must be live; `experts` must point to `n_experts` handles;
 * `out` must be writable.
 */
enum AbmStatus abm_merge(const struct AbmModel *base,
                         const struct AbmModel *const *experts,
                         uintptr_t n_experts,
                         enum AbmMergeMethod method,
                         uintptr_t iters,
                         double lr,
                         uint64_t seed,
                         struct AbmModel **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ABM_FFI_H */
