#ifndef LACE_H
#define LACE_H

/* Generated by cbindgen from the lace-capi crate; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every API function.
 */
typedef enum LaceStatus {
  /**
   * The call succeeded.
   */
  LaceOk = 0,
  /**
   * A required pointer argument was null.
   */
  LaceNullPointer = 1,
  /**
   * An argument was out of range or inconsistent.
   */
  LaceInvalidArgument = 2,
  /**
   * The operation itself failed; see `lace_last_error`.
   */
  LaceRuntimeError = 3,
} LaceStatus;

/**
 * Noise-schedule handle.
 */
typedef struct LaceSchedule LaceSchedule;

/**
 * Attribute schema handle (domains and their values).
 */
typedef struct LaceSchema LaceSchema;

/**
 * Analytic Gaussian world handle (closed-form noise oracle).
 */
typedef struct LaceWorld LaceWorld;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns a pointer to a NUL-terminated description of the most recent
 * error on this thread. Valid until the next failing call on the same
 * thread. Never null.
 */
const char *lace_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *lace_version(void);

/**
 * Creates the built-in shapes schema (shape/color/background with 3/3/2
 * values). The handle must be released with `lace_schema_free`.
 */
enum LaceStatus lace_schema_default(struct LaceSchema **out);

/**
 * Releases a schema handle. Null is a no-op.
 */
void lace_schema_free(struct LaceSchema *schema);

/**
 * Writes the number of attribute domains.
 */
enum LaceStatus lace_schema_num_domains(const struct LaceSchema *schema, size_t *out);

/**
 * Writes the number of values in the given domain.
 */
enum LaceStatus lace_schema_num_values(const struct LaceSchema *schema, size_t domain, size_t *out);

/**
 * Renders one procedural image for the given attribute assignment into
 * `out` (length `3 * height * width`, channel-major).
 */
enum LaceStatus lace_render_sample(const struct LaceSchema *schema,
                                   const size_t *values,
                                   size_t num_values,
                                   uint64_t seed,
                                   size_t height,
                                   size_t width,
                                   double *out);

/**
 * Builds a noise schedule. `kind` is 0 for linear, 1 for cosine (which
 * ignores the beta bounds). The handle must be released with
 * `lace_schedule_free`.
 */
enum LaceStatus lace_schedule_new(uint32_t kind,
                                  size_t num_steps,
                                  double beta_start,
                                  double beta_end,
                                  struct LaceSchedule **out);

/**
 * Releases a schedule handle. Null is a no-op.
 */
void lace_schedule_free(struct LaceSchedule *schedule);

/**
 * Writes the cumulative signal coefficient alpha_bar at timestep `t`
 * (0 <= t <= T; alpha_bar at 0 is 1).
 */
enum LaceStatus lace_schedule_alpha_bar(const struct LaceSchedule *schedule, size_t t, double *out);

/**
 * Applies the closed-form forward noising `x_t = sqrt(ab_t) x0 +
 * sqrt(1 - ab_t) noise`. `x0`, `noise`, and `out` all have length
 * `channels * height * width`.
 */
enum LaceStatus lace_forward_diffuse(const struct LaceSchedule *schedule,
                                     const double *x0,
                                     const double *noise,
                                     size_t channels,
                                     size_t height,
                                     size_t width,
                                     size_t t,
                                     double *out);

/**
 * Combines a source noise prediction with `num_variants` single-edit
 * target predictions: `out = src + sum_d scale_d * (tgt_d - src)`.
 * `targets` is the concatenation of the variant buffers, each of length
 * `len`.
 */
enum LaceStatus lace_mcg_combine(const double *src,
                                 const double *targets,
                                 size_t num_variants,
                                 const double *scales,
                                 size_t len,
                                 double *out);

/**
 * Creates a randomly parameterized Gaussian mixture world over the schema
 * with latent shape `(channels, height, width)`. The handle must be
 * released with `lace_world_free`.
 */
enum LaceStatus lace_world_new(const struct LaceSchema *schema,
                               size_t channels,
                               size_t height,
                               size_t width,
                               uint64_t seed,
                               struct LaceWorld **out);

/**
 * Releases a world handle. Null is a no-op.
 */
void lace_world_free(struct LaceWorld *world);

/**
 * Draws one clean sample for the given attribute assignment into `out`
 * (length `channels * height * width` of the world's shape).
 */
enum LaceStatus lace_world_sample(const struct LaceWorld *world,
                                  const size_t *values,
                                  size_t num_values,
                                  uint64_t seed,
                                  double *out);

/**
 * Runs deterministic inversion plus multi-domain guided resampling against
 * the world's closed-form noise oracle. `x0` and `out` have the world's
 * buffer length. Edits are parallel arrays of `num_edits` entries.
 */
enum LaceStatus lace_world_translate(const struct LaceWorld *world,
                                     const struct LaceSchedule *schedule,
                                     const double *x0,
                                     const size_t *source_values,
                                     size_t num_values,
                                     const size_t *edit_domains,
                                     const size_t *edit_values,
                                     const double *edit_scales,
                                     size_t num_edits,
                                     size_t steps,
                                     double *out);

/**
 * Mean squared error between two equally shaped buffers.
 */
enum LaceStatus lace_mse(const double *a,
                         const double *b,
                         size_t channels,
                         size_t height,
                         size_t width,
                         double *out);

/**
 * PSNR in dB over the [-1, 1] range, capped at 99.
 */
enum LaceStatus lace_psnr(const double *a,
                          const double *b,
                          size_t channels,
                          size_t height,
                          size_t width,
                          double *out);

/**
 * Mean SSIM (11x11 Gaussian windows). Requires height and width >= 11.
 */
enum LaceStatus lace_ssim(const double *a,
                          const double *b,
                          size_t channels,
                          size_t height,
                          size_t width,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LACE_H */
