#ifndef GNDM_H
#define GNDM_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes of every fallible call.
 */
typedef enum GndmStatus {
  GNDM_STATUS_OK = 0,
  GNDM_STATUS_NULL_POINTER = 1,
  GNDM_STATUS_DOMAIN = 2,
  GNDM_STATUS_SHAPE = 3,
  GNDM_STATUS_NON_FINITE = 4,
  GNDM_STATUS_DEGENERATE = 5,
  GNDM_STATUS_CONFIG = 6,
  GNDM_STATUS_IO = 7,
  GNDM_STATUS_CHECKPOINT = 8,
  GNDM_STATUS_UTF8 = 9,
  GNDM_STATUS_PANIC = 10,
} GndmStatus;

/**
 * A Gaussian-mixture teacher.
 */
typedef struct GndmTeacher GndmTeacher;

/**
 * A training run held in memory.
 */
typedef struct GndmTrainer GndmTrainer;

/**
 * Evaluation of the current student.
 */
typedef struct GndmMetrics {
  uint64_t iter;
  double energy_dist;
  /**
   * NaN when no auxiliary reward is configured.
   */
  double aux_reward_mean;
  /**
   * Smallest per-mode coverage fraction.
   */
  double min_coverage;
  uint64_t samples;
} GndmMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Last error on this thread, or null. Valid until the next failing call
 * on the same thread.
 */
const char *gndm_last_error(void);

void gndm_clear_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *gndm_version(void);

/**
 * Equal-weight ring of `k` isotropic components in 2D.
 *
 * # Safety
 * `out` must be a valid pointer to write a handle into.
 */
enum GndmStatus gndm_teacher_ring(size_t k,
                                  double radius,
                                  double variance,
                                  struct GndmTeacher **out);

/**
 * General mixture: `weights[k]`, `means[k * d]`, `variances[k]`.
 *
 * # Safety
 * Array pointers must reference the stated number of doubles; `out` must
 * be writable.
 */
enum GndmStatus gndm_teacher_new(size_t k,
                                 size_t d,
                                 const double *weights,
                                 const double *means,
                                 const double *variances,
                                 struct GndmTeacher **out);

/**
 * # Safety
 * `teacher` must come from a teacher constructor and not be freed twice.
 * Null is ignored.
 */
void gndm_teacher_free(struct GndmTeacher *teacher);

/**
 * # Safety
 * `teacher` must be a live handle; outputs must be writable.
 */
enum GndmStatus gndm_teacher_shape(const struct GndmTeacher *teacher,
                                   size_t *dim,
                                   size_t *components);

/**
 * Score of the noisy marginal at time `t` in `(0, 1)`.
 *
 * # Safety
 * `x` and `out` must reference `d` doubles where `d` is the teacher dimension.
 */
enum GndmStatus gndm_teacher_score(const struct GndmTeacher *teacher,
                                   const double *x,
                                   size_t d,
                                   double t,
                                   double *out);

/**
 * Posterior-mean denoiser `E[x0 | x_t]`.
 *
 * # Safety
 * `x` and `out` must reference `d` doubles.
 */
enum GndmStatus gndm_teacher_denoise(const struct GndmTeacher *teacher,
                                     const double *x,
                                     size_t d,
                                     double t,
                                     double *out);

/**
 * `n` clean samples into `out[n * d]`, reproducible from `seed`.
 *
 * # Safety
 * `out` must reference `n * d` doubles.
 */
enum GndmStatus gndm_teacher_sample(const struct GndmTeacher *teacher,
                                    uint64_t seed,
                                    size_t n,
                                    double *out);

/**
 * Energy distance between `a[na * d]` and `b[nb * d]`.
 *
 * # Safety
 * Arrays must reference the stated number of doubles.
 */
enum GndmStatus gndm_energy_distance(const double *a,
                                     size_t na,
                                     const double *b,
                                     size_t nb,
                                     size_t d,
                                     double *out);

/**
 * Builds a trainer from configuration text in the CLI's `key = value`
 * format. Empty text gives the defaults.
 *
 * # Safety
 * `config` must be a NUL-terminated string; `out` must be writable.
 */
enum GndmStatus gndm_trainer_new(const char *config, struct GndmTrainer **out);

/**
 * # Safety
 * `trainer` must come from [`gndm_trainer_new`] and not be freed twice.
 * Null is ignored.
 */
void gndm_trainer_free(struct GndmTrainer *trainer);

/**
 * Runs `rounds` training rounds. `aborted`, if non-null, receives the
 * number of rounds that were rolled back after a non-finite value.
 *
 * # Safety
 * `trainer` must be a live handle.
 */
enum GndmStatus gndm_trainer_step(struct GndmTrainer *trainer, size_t rounds, size_t *aborted);

/**
 * Completed rounds.
 *
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum GndmStatus gndm_trainer_round(const struct GndmTrainer *trainer, size_t *out);

/**
 * Evaluates the current student against the teacher.
 *
 * # Safety
 * `trainer` must be a live handle and `out` writable.
 */
enum GndmStatus gndm_trainer_evaluate(const struct GndmTrainer *trainer, struct GndmMetrics *out);

/**
 * Draws `n` samples from the current student into `out[n * d]`.
 *
 * # Safety
 * `trainer` must be a live handle and `out` must reference `n * d` doubles.
 */
enum GndmStatus gndm_trainer_generate(const struct GndmTrainer *trainer,
                                      uint64_t seed,
                                      size_t n,
                                      double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GNDM_H */
