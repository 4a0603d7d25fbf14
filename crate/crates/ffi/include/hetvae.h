#ifndef HETVAE_H
#define HETVAE_H

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes.
 */
typedef enum HetvaeStatus {
  HETVAE_STATUS_OK = 0,
  HETVAE_STATUS_NULL_POINTER = 1,
  HETVAE_STATUS_CONFIG = 2,
  HETVAE_STATUS_DATA = 3,
  HETVAE_STATUS_NUMERICAL = 4,
  HETVAE_STATUS_IO = 5,
  HETVAE_STATUS_DIMENSION = 6,
  HETVAE_STATUS_CONTRACT = 7,
  HETVAE_STATUS_PANIC = 8,
} HetvaeStatus;

/**
 * A loaded checkpoint.
 */
typedef struct HetvaeModel HetvaeModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread, or null. The pointer
 * stays valid until the next call into this library on the same thread.
 */
const char *hetvae_last_error(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum HetvaeStatus hetvae_model_load(const char *path, struct HetvaeModel **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `model` must come from [`hetvae_model_load`] and not be used afterwards.
 */
void hetvae_model_free(struct HetvaeModel *model);

/**
 * Number of input dimensions `D`.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum HetvaeStatus hetvae_model_input_dim(const struct HetvaeModel *model, uintptr_t *out);

/**
 * Conditions on observations given as parallel arrays `(times[i], dims[i],
 * values[i])` and writes the mixture mean and standard deviation at each
 * query time to `out_mean` / `out_std`, row-major `[n_query, D]`. Times and
 * values are in the original data units.
 *
 * # Safety
 * Input arrays must hold `n_obs` (resp. `n_query`) elements and outputs
 * `n_query · D` elements.
 */
enum HetvaeStatus hetvae_interpolate(const struct HetvaeModel *model,
                                     uintptr_t n_obs,
                                     const double *times,
                                     const uintptr_t *dims,
                                     const double *values,
                                     uintptr_t n_query,
                                     const double *query_times,
                                     uintptr_t samples,
                                     uint64_t seed,
                                     double *out_mean,
                                     double *out_std);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hetvae_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HETVAE_H */
