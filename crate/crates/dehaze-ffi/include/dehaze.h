#ifndef DEHAZE_FFI_H
#define DEHAZE_FFI_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Decode strategy selector for `dehaze_run`.
 */
typedef enum DehazeMode {
  DehazeModeCritic = 0,
  DehazeModeConfidence = 1,
  DehazeModeNn = 2,
  DehazeModeOneshot = 3,
} DehazeMode;

/**
 * Status codes returned by every FFI call.
 */
typedef enum DehazeStatus {
  DehazeOk = 0,
  DehazeInvalidArgument = 1,
  DehazeIoError = 2,
  DehazeRuntimeError = 3,
} DehazeStatus;

/**
 * Opaque model handle; create with `dehaze_model_load`, release with
 * `dehaze_model_free`.
 */
typedef struct DehazeModelHandle DehazeModelHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. The pointer stays
 * valid until the next FFI call on the same thread.
 */
const char *dehaze_last_error(void);

/**
 * Load a trained checkpoint. On success writes a heap-allocated handle to
 * `out_model` and returns `DehazeOk`.
 *
 * # Safety
 * `ckpt_path` must be a valid NUL-terminated string; `out_model` must be a
 * valid pointer to writable memory.
 */
enum DehazeStatus dehaze_model_load(const char *ckpt_path, struct DehazeModelHandle **out_model);

/**
 * Release a handle returned by `dehaze_model_load`. Passing NULL is a no-op.
 *
 * # Safety
 * `model` must be a pointer previously returned by `dehaze_model_load`
 * that has not already been freed.
 */
void dehaze_model_free(struct DehazeModelHandle *model);

/**
 * Dehaze `input_path` (PNG) into `output_path` using `iters` decode
 * iterations of the chosen mode.
 *
 * # Safety
 * `model` must be a live handle; both paths must be valid NUL-terminated
 * strings.
 */
enum DehazeStatus dehaze_run(const struct DehazeModelHandle *model,
                             const char *input_path,
                             const char *output_path,
                             uint32_t iters,
                             enum DehazeMode mode,
                             uint64_t seed);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* DEHAZE_FFI_H */
