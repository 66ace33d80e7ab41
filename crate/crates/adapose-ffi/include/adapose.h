#ifndef ADAPOSE_H
#define ADAPOSE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum AdpStatus {
  AdpStatus_Ok = 0,
  /**
   * A required pointer argument was null.
   */
  AdpStatus_NullPointer = 1,
  /**
   * An argument was out of range or malformed.
   */
  AdpStatus_InvalidArgument = 2,
  /**
   * A path or string argument was not valid UTF-8.
   */
  AdpStatus_InvalidUtf8 = 3,
  /**
   * File could not be read or parsed.
   */
  AdpStatus_Io = 4,
  /**
   * The operation itself failed; see `adp_last_error`.
   */
  AdpStatus_Runtime = 5,
  /**
   * A panic was caught at the boundary.
   */
  AdpStatus_Internal = 6,
} AdpStatus;

/**
 * A dataset loaded from a `.csid` file.
 */
typedef struct AdpDataset AdpDataset;

/**
 * A pose regression network with resolved parameters.
 */
typedef struct AdpModel AdpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message for the calling thread into `buf` as a
 * nul-terminated string, truncating to `cap` bytes. Returns the full message
 * length in bytes (excluding the terminator), so calling with a null `buf`
 * sizes the message.
 */
uintptr_t adp_last_error(char *buf, uintptr_t cap);

/**
 * Opens a `.csid` dataset file. On success writes a handle to `out`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum AdpStatus adp_dataset_open(const char *path, struct AdpDataset **out);

/**
 * Releases a dataset handle. Null is ignored.
 *
 * # Safety
 * `ds` must come from `adp_dataset_open` and not be used afterwards.
 */
void adp_dataset_free(struct AdpDataset *ds);

/**
 * Number of CSI windows in the dataset.
 *
 * # Safety
 * `ds` and `out` must be valid pointers.
 */
enum AdpStatus adp_dataset_len(const struct AdpDataset *ds, uintptr_t *out);

/**
 * Window shape as (antenna pairs, subcarriers, frames).
 *
 * # Safety
 * All pointers must be valid.
 */
enum AdpStatus adp_dataset_shape(const struct AdpDataset *ds,
                                 uintptr_t *channels,
                                 uintptr_t *height,
                                 uintptr_t *width);

/**
 * Creates a freshly initialized model for a named scale ("desk" or "paper").
 *
 * # Safety
 * `scale` must be a nul-terminated string and `out` a valid pointer.
 */
enum AdpStatus adp_model_init(const char *scale, uint64_t seed, struct AdpModel **out);

/**
 * Loads model parameters from an `.apck` checkpoint for a named scale.
 *
 * # Safety
 * `checkpoint` and `scale` must be nul-terminated strings, `out` valid.
 */
enum AdpStatus adp_model_open(const char *checkpoint, const char *scale, struct AdpModel **out);

/**
 * Releases a model handle. Null is ignored.
 *
 * # Safety
 * `model` must come from `adp_model_init`/`adp_model_open` and not be used
 * afterwards.
 */
void adp_model_free(struct AdpModel *model);

/**
 * Number of joints the model predicts per frame.
 *
 * # Safety
 * `model` and `out` must be valid pointers.
 */
enum AdpStatus adp_model_joint_count(const struct AdpModel *model, uintptr_t *out);

/**
 * Predicts the pose for one dataset window. `out_xy` receives
 * `joint_count * 2` doubles as interleaved (x, y) pairs.
 *
 * # Safety
 * All pointers must be valid; `out_xy` must have room for
 * `adp_model_joint_count` * 2 doubles.
 */
enum AdpStatus adp_predict(const struct AdpModel *model,
                           const struct AdpDataset *ds,
                           uintptr_t index,
                           double *out_xy);

/**
 * Evaluates PCK on a fully labeled dataset. `thresholds` are percentages of
 * torso length; `out_fractions` receives one fraction per threshold, ordered
 * by ascending threshold.
 *
 * # Safety
 * All pointers must be valid; `thresholds` and `out_fractions` must hold
 * `n_thresholds` doubles each.
 */
enum AdpStatus adp_evaluate_pck(const struct AdpModel *model,
                                const struct AdpDataset *ds,
                                const double *thresholds,
                                uintptr_t n_thresholds,
                                double *out_fractions);

/**
 * Biased squared MMD between two row-major point sets of `dim` columns.
 * With `n_bandwidths == 0` the linear kernel is used; otherwise a sum of
 * RBF kernels with the given bandwidths (squared length scales).
 *
 * # Safety
 * `xs` must hold `n_xs * dim` doubles, `xt` `n_xt * dim`, `bandwidths`
 * `n_bandwidths`; `out` must be valid.
 */
enum AdpStatus adp_mmd2(const double *xs,
                        uintptr_t n_xs,
                        const double *xt,
                        uintptr_t n_xt,
                        uintptr_t dim,
                        const double *bandwidths,
                        uintptr_t n_bandwidths,
                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ADAPOSE_H */
