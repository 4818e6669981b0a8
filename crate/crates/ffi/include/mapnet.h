#ifndef MAPNET_H
#define MAPNET_H

/* Generated by cbindgen from mapnet-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every entry point.
 */
typedef enum mapnet_status_t {
  MAPNET_STATUS_T_OK = 0,
  MAPNET_STATUS_T_CONFIG_ERROR = 1,
  MAPNET_STATUS_T_DATA_ERROR = 2,
  MAPNET_STATUS_T_NUMERIC_ERROR = 3,
  MAPNET_STATUS_T_IO_ERROR = 4,
  MAPNET_STATUS_T_INVALID_ARGUMENT = 5,
} mapnet_status_t;

/**
 * Opaque parsed-and-validated run configuration.
 */
typedef struct mapnet_config_t mapnet_config_t;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error message for this thread. Valid until the next failing call.
 */
const char *mapnet_last_error(void);

/**
 * Library version as a static string.
 */
const char *mapnet_version(void);

/**
 * Parse and validate a JSON run configuration.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out` must be a valid pointer.
 */
enum mapnet_status_t mapnet_config_parse(const char *json, struct mapnet_config_t **out);

/**
 * Apply one dotted-key override to a parsed config, revalidating.
 *
 * # Safety
 * `cfg` must come from `mapnet_config_parse`; strings are NUL-terminated.
 */
enum mapnet_status_t mapnet_config_set(struct mapnet_config_t *cfg,
                                       const char *key,
                                       const char *value);

/**
 * Serialize the resolved config back to JSON (caller frees with
 * `mapnet_string_free`).
 *
 * # Safety
 * `cfg` must come from `mapnet_config_parse`; `out` must be valid.
 */
enum mapnet_status_t mapnet_config_to_json(const struct mapnet_config_t *cfg, char **out);

/**
 * Free a config handle.
 *
 * # Safety
 * `cfg` must come from `mapnet_config_parse` (NULL is a no-op).
 */
void mapnet_config_free(struct mapnet_config_t *cfg);

/**
 * Free a string returned by this library.
 *
 * # Safety
 * `s` must come from a mapnet function (NULL is a no-op).
 */
void mapnet_string_free(char *s);

/**
 * Free a float buffer returned by this library.
 *
 * # Safety
 * `p`/`len` must come from `mapnet_generate_params` (NULL is a no-op).
 */
void mapnet_buffer_free(float *p, uintptr_t len);

/**
 * Train a run into `out_dir`, writing the resolved config, metrics
 * stream, and checkpoint. On success `result_json` (optional) receives a
 * summary the caller frees with `mapnet_string_free`.
 *
 * # Safety
 * `cfg` must come from `mapnet_config_parse`; `out_dir` NUL-terminated.
 */
enum mapnet_status_t mapnet_train(const struct mapnet_config_t *cfg,
                                  const char *out_dir,
                                  char **result_json);

/**
 * Evaluate a checkpoint on its configured dataset. The caller frees the
 * JSON result with `mapnet_string_free`.
 *
 * # Safety
 * Strings are NUL-terminated; `result_json` must be valid.
 */
enum mapnet_status_t mapnet_eval_checkpoint(const char *checkpoint_path, char **result_json);

/**
 * Regenerate the full flat parameter vector from a checkpoint's latents.
 * The buffer (always f32) is owned by the caller; free it with
 * `mapnet_buffer_free(buf, len)`.
 *
 * # Safety
 * Strings are NUL-terminated; `out_buf` and `out_len` must be valid.
 */
enum mapnet_status_t mapnet_generate_params(const char *checkpoint_path,
                                            float **out_buf,
                                            uintptr_t *out_len);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MAPNET_H */
