#ifndef EGOMEM_H
#define EGOMEM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum EgmStatus {
  EGM_OK = 0,
  /**
   * A required pointer argument was null.
   */
  EGM_NULL_ARGUMENT = 1,
  /**
   * An argument was out of range or malformed.
   */
  EGM_INVALID_ARGUMENT = 2,
  /**
   * The output buffer is shorter than the result.
   */
  EGM_BUFFER_TOO_SMALL = 3,
  /**
   * A file could not be read.
   */
  EGM_IO = 4,
  /**
   * Generation or model evaluation failed.
   */
  EGM_FAILED = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  EGM_PANIC = 6,
} EgmStatus;

/**
 * Opaque environment handle.
 */
typedef struct EgmEnv EgmEnv;

/**
 * Opaque environment memory model handle.
 */
typedef struct EgmModel EgmModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *egm_version(void);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call into the library on the same thread.
 */
const char *egm_last_error_message(void);

/**
 * Releases a string returned by the library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not be freed twice.
 */
void egm_string_free(char *s);

/**
 * Generates an environment with default parameters.
 *
 * # Safety
 * `out` must be a valid pointer to write the handle to.
 */
enum EgmStatus egm_env_generate(uint64_t seed, struct EgmEnv **out);

/**
 * Parses an environment from its JSON form.
 *
 * # Safety
 * `json` must be NUL-terminated; `out` must be writable.
 */
enum EgmStatus egm_env_from_json(const char *json, struct EgmEnv **out);

/**
 * Serializes an environment to JSON; release the string with
 * `egm_string_free`.
 *
 * # Safety
 * `env` must be a live handle; `out` must be writable.
 */
enum EgmStatus egm_env_to_json(const struct EgmEnv *env, char **out);

/**
 * Number of object classes, which is the label length.
 *
 * # Safety
 * `env` must be a live handle or null.
 */
size_t egm_env_object_classes(const struct EgmEnv *env);

/**
 * Length of the egocentric feature vector for this environment.
 *
 * # Safety
 * `env` must be a live handle or null.
 */
size_t egm_env_feature_dim(const struct EgmEnv *env);

/**
 * Releases an environment. Null is ignored.
 *
 * # Safety
 * `env` must come from this library and not be freed twice.
 */
void egm_env_free(struct EgmEnv *env);

/**
 * Local-state label at pose `(x, z, heading bin)`: one code per object class
 * (0 absent, 1 forward, 2 right, 3 behind, 4 left) into `out[0..out_len]`.
 *
 * # Safety
 * `env` must be a live handle; `out` must hold `out_len` bytes.
 */
enum EgmStatus egm_local_state_label(const struct EgmEnv *env,
                                     double x,
                                     double z,
                                     uint8_t heading,
                                     uint8_t *out,
                                     size_t out_len);

/**
 * Egocentric frame features at pose `(x, z, heading bin)` into `out`.
 *
 * # Safety
 * `env` must be a live handle; `out` must hold `out_len` floats.
 */
enum EgmStatus egm_egocentric_features(const struct EgmEnv *env,
                                       double x,
                                       double z,
                                       uint8_t heading,
                                       float *out,
                                       size_t out_len);

/**
 * Loads a model checkpoint (binary file plus its `.json` sidecar).
 *
 * # Safety
 * `path` must be NUL-terminated; `out` must be writable.
 */
enum EgmStatus egm_model_load(const char *path, struct EgmModel **out);

/**
 * Width of the environment feature `h`.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t egm_model_dim(const struct EgmModel *model);

/**
 * Frame feature width the model expects.
 *
 * # Safety
 * `model` must be a live handle or null.
 */
size_t egm_model_feature_dim(const struct EgmModel *model);

/**
 * Releases a model. Null is ignored.
 *
 * # Safety
 * `model` must come from this library and not be freed twice.
 */
void egm_model_free(struct EgmModel *model);

/**
 * Environment feature for `query_step` of a walkthrough of `steps` frames.
 * `features` is `steps × feature_dim` row-major, `poses` is `steps × 3`
 * (`x`, `z`, heading in radians, a multiple of pi/6), as in walkthrough
 * records. `k` memory frames are sampled on the inference
 * grid with relative poses. Writes `d` values to `out`.
 *
 * # Safety
 * `model` must be a live handle and the buffers must have the stated sizes.
 */
enum EgmStatus egm_environment_feature(const struct EgmModel *model,
                                       const float *features,
                                       const double *poses,
                                       size_t steps,
                                       size_t query_step,
                                       size_t k,
                                       double *out,
                                       size_t out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EGOMEM_H */
