#ifndef P4D_H
#define P4D_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum P4dStatus {
  P4D_STATUS_OK = 0,
  // A required pointer argument was null.
  P4D_STATUS_NULL_POINTER = 1,
  // An argument was out of range, a buffer too small, or a string not UTF-8.
  P4D_STATUS_INVALID_ARGUMENT = 2,
  // Bad configuration, scene spec or instruction.
  P4D_STATUS_CONFIG = 3,
  // The engine failed while running.
  P4D_STATUS_RUNTIME = 4,
  // An internal panic was caught.
  P4D_STATUS_PANIC = 5,
} P4dStatus;

// Opaque handle to a finished run and the renders of its final field.
typedef struct P4dRun P4dRun;

// Opaque scene handle.
typedef struct P4dScene P4dScene;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *p4d_version(void);

// Message of the last failed call on this thread, or null after a success.
// Valid until the next call into the library on this thread.
const char *p4d_last_error(void);

// Generates the procedural scene with the given size and seed.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum P4dStatus p4d_scene_generate(size_t views,
                                  size_t frames,
                                  size_t width,
                                  size_t height,
                                  uint64_t seed,
                                  struct P4dScene **out);

// Generates the default scene.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum P4dStatus p4d_scene_default(struct P4dScene **out);

// Loads a scene directory or manifest file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid handle slot.
enum P4dStatus p4d_scene_load(const char *path, struct P4dScene **out);

// Writes the scene manifest and frames into `dir`.
//
// # Safety
// `scene` must be a live handle and `dir` a NUL-terminated string.
enum P4dStatus p4d_scene_save(const struct P4dScene *scene, const char *dir);

// Reports the scene dimensions. Any output pointer may be null.
//
// # Safety
// `scene` must be a live handle; non-null outputs must be writable.
enum P4dStatus p4d_scene_dims(const struct P4dScene *scene,
                              size_t *views,
                              size_t *frames,
                              size_t *width,
                              size_t *height);

// Copies the RGB frame of (`view`, `t`) as `width*height*3` row-major floats.
//
// # Safety
// `scene` must be a live handle and `buf` point to `len` writable floats.
enum P4dStatus p4d_scene_frame_rgb(const struct P4dScene *scene,
                                   size_t view,
                                   size_t t,
                                   float *buf,
                                   size_t len);

// Releases a scene. Null is ignored.
//
// # Safety
// `scene` must be null or a handle not yet freed.
void p4d_scene_free(struct P4dScene *scene);

// Runs the editing pipeline on `scene`. `config_json` is a run configuration
// in JSON, or null for the defaults; its `scene` key is ignored. When it sets
// `out`, the run directory is written as by the command line tool.
//
// # Safety
// `scene` must be a live handle, `config_json` null or NUL-terminated, and
// `out` a valid handle slot.
enum P4dStatus p4d_run(const struct P4dScene *scene, const char *config_json, struct P4dRun **out);

// Number of completed iterations in the run log.
//
// # Safety
// `run` must be a live handle and `count` writable.
enum P4dStatus p4d_run_iterations(const struct P4dRun *run, size_t *count);

// Consistency scores of the dataset produced by iteration `index` (0-based).
//
// # Safety
// `run` must be a live handle and both outputs writable.
enum P4dStatus p4d_run_consistency(const struct P4dRun *run,
                                   size_t index,
                                   double *temporal_var,
                                   double *spatial_err);

// Copies the final field's render of (`view`, `t`) as `width*height*3` floats.
//
// # Safety
// `run` must be a live handle and `buf` point to `len` writable floats.
enum P4dStatus p4d_run_render_rgb(const struct P4dRun *run,
                                  size_t view,
                                  size_t t,
                                  float *buf,
                                  size_t len);

// Releases a run. Null is ignored.
//
// # Safety
// `run` must be null or a handle not yet freed.
void p4d_run_free(struct P4dRun *run);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* P4D_H */
