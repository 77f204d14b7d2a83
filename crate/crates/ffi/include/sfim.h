/* C interface for the sfim image-restoration toolkit. */

#ifndef SFIM_H
#define SFIM_H

/* Generated by the sfim-ffi build script; edit src/lib.rs instead. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Call outcome. Matches the `sfim` binary's exit-code classes so embedders
// and shell users read the same numbers.
typedef enum SfimStatus {
  // Success.
  SFIM_STATUS_OK = 0,
  // Invalid argument, malformed configuration, or shape mismatch.
  SFIM_STATUS_CONFIG = 2,
  // Numeric failure (non-finite values, failed internal check).
  SFIM_STATUS_NUMERIC = 3,
  // File or image I/O failure.
  SFIM_STATUS_IO = 4,
  // Internal panic caught at the boundary; state may be stale but the
  // process is intact.
  SFIM_STATUS_PANIC = 5,
} SfimStatus;

// A restoration model rebuilt from a checkpoint file: network weights plus
// the architecture description stored alongside them. Opaque; create with
// [`sfim_model_load`], release with [`sfim_model_free`].
typedef struct SfimModel SfimModel;

// Architecture summary filled in by [`sfim_model_info`].
typedef struct SfimModelInfo {
  // Pyramid depth.
  size_t levels;
  // Feature width at the finest level.
  size_t width;
  // Image channels the model expects.
  size_t in_channels;
  // Attention patch edge.
  size_t patch;
  // Total scalar parameter count.
  size_t param_count;
} SfimModelInfo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *sfim_version(void);

// Text for the calling thread's most recent failure, empty after a success.
// The pointer stays valid until the same thread's next call into the
// library.
const char *sfim_last_error_message(void);

// Caps the worker thread pool. Zero keeps the default (the `SFIM_THREADS`
// environment variable if set, otherwise one thread per core). The first
// call that takes effect wins for the life of the process.
enum SfimStatus sfim_set_threads(size_t threads);

// Loads a checkpoint file and rebuilds its model. Returns null on failure;
// [`sfim_last_error_message`] has the reason. Free with [`sfim_model_free`].
//
// # Safety
// `path` must be a NUL-terminated C string.
struct SfimModel *sfim_model_load(const char *path);

// Releases a model handle. Null is a no-op.
//
// # Safety
// `model` must be null or a pointer from [`sfim_model_load`] that has not
// been freed, with no other call using it concurrently.
void sfim_model_free(struct SfimModel *model);

// Fills `info` with the handle's architecture summary.
//
// # Safety
// `model` must be a live handle from [`sfim_model_load`]; `info` must point
// to writable memory for one `SfimModelInfo`.
enum SfimStatus sfim_model_info(const struct SfimModel *model, struct SfimModelInfo *info);

// Restores one planar `[channels][height][width]` image of doubles into
// `output` (same extents, caller-allocated). Any extents work; inputs are
// padded internally. `tile` of zero processes the frame whole; a positive
// value restores overlapping tiles of that edge to bound memory.
//
// # Safety
// `model` must be a live handle. `input` must hold and `output` must have
// room for `channels * height * width` doubles; they may not overlap.
enum SfimStatus sfim_model_restore(const struct SfimModel *model,
                                   const double *input,
                                   size_t channels,
                                   size_t height,
                                   size_t width,
                                   size_t tile,
                                   double *output);

// One-shot file restore: loads `ckpt`, reads `input`, writes the restored
// image to `output`. Formats follow the extensions (`.png` or the native
// tensor format). `tile` as in [`sfim_model_restore`].
//
// # Safety
// All three paths must be NUL-terminated C strings.
enum SfimStatus sfim_restore_file(const char *ckpt,
                                  const char *input,
                                  const char *output,
                                  size_t tile);

// Applies a synthetic under-display degradation to a clean planar image and
// writes the result to `output` (same extents, caller-allocated, clamped to
// `[0, 1]`). `recipe_toml` is the same TOML recipe the CLI accepts, or null
// for the default recipe; sampled ranges draw deterministically from
// `seed`, matching the CLI's single-image path.
//
// # Safety
// `input` must hold and `output` must have room for
// `channels * height * width` doubles; they may not overlap. `recipe_toml`
// must be null or a NUL-terminated C string.
enum SfimStatus sfim_degrade(const double *input,
                             size_t channels,
                             size_t height,
                             size_t width,
                             const char *recipe_toml,
                             uint64_t seed,
                             double *output);

// Peak signal-to-noise ratio (dB) and mean structural similarity of a
// restored/reference pair of planar images with identical extents.
//
// # Safety
// `restored` and `reference` must each hold `channels * height * width`
// doubles; `out_psnr` and `out_ssim` must be writable or null (null skips
// that metric).
enum SfimStatus sfim_quality(const double *restored,
                             const double *reference,
                             size_t channels,
                             size_t height,
                             size_t width,
                             double *out_psnr,
                             double *out_ssim);

// Scores how strongly a degraded/clean pair's amplitude-spectrum difference
// concentrates along the frequency axes relative to an isotropic floor.
// Values well above one indicate slit-like diffraction streaks.
//
// # Safety
// `degraded` and `clean` must each hold `channels * height * width`
// doubles; `out_score` must be writable.
enum SfimStatus sfim_flare_prior_score(const double *degraded,
                                       const double *clean,
                                       size_t channels,
                                       size_t height,
                                       size_t width,
                                       double *out_score);

// Runs the library's built-in verification suite (kernel oracles, analytic
// loss values, finite-difference gradient checks). Returns `Ok` when every
// check passes; on failure the error text lists the failing checks.
enum SfimStatus sfim_selftest(uint64_t seed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SFIM_H */
