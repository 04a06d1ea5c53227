#ifndef CPDYN_H
#define CPDYN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CpdynStatus {
  CPDYN_STATUS_OK = 0,
  CPDYN_STATUS_NULL_POINTER = 1,
  CPDYN_STATUS_INVALID_ARGUMENT = 2,
  CPDYN_STATUS_SHAPE_MISMATCH = 3,
  CPDYN_STATUS_BUFFER_TOO_SMALL = 4,
  CPDYN_STATUS_DIVERGED = 5,
  CPDYN_STATUS_IO = 6,
  /**
   * A Rust panic was caught at the boundary.
   */
  CPDYN_STATUS_INTERNAL = 7,
} CpdynStatus;

typedef enum CpdynLossKind {
  /**
   * `z² / 2`
   */
  CPDYN_LOSS_KIND_HALF_SQUARED = 0,
  /**
   * `z²`
   */
  CPDYN_LOSS_KIND_SQUARED = 1,
  CPDYN_LOSS_KIND_HUBER = 2,
  /**
   * Huber divided by its transition point.
   */
  CPDYN_LOSS_KIND_SCALED_HUBER = 3,
} CpdynLossKind;

typedef struct CpdynFactorization CpdynFactorization;

/**
 * Completion or sensing objective.
 */
typedef struct CpdynProblem CpdynProblem;

typedef struct CpdynTrainer CpdynTrainer;

/**
 * Loss selector; `delta` is read by the Huber kinds only.
 */
typedef struct CpdynLoss {
  enum CpdynLossKind kind;
  double delta;
} CpdynLoss;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Bytes needed for the last error message including its terminator, or 0
 * when the last call succeeded.
 */
size_t cpdyn_last_error_length(void);

/**
 * Copies the last error message into `buf`. Returns the message length
 * without terminator, 0 if there is none, or -1 if `len` is too small.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
ptrdiff_t cpdyn_last_error_message(char *buf, size_t len);

/**
 * Completion problem from `count` observed entries; `indices` holds
 * `count × order` coordinates.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum CpdynStatus cpdyn_completion_new(const size_t *dims,
                                      size_t order,
                                      const size_t *indices,
                                      const double *values,
                                      size_t count,
                                      struct CpdynProblem **out);

/**
 * Sensing problem from `count` row-major measurement tensors stacked in
 * `sensors` and their values.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths.
 */
enum CpdynStatus cpdyn_sensing_new(const size_t *dims,
                                   size_t order,
                                   const double *sensors,
                                   const double *values,
                                   size_t count,
                                   struct CpdynProblem **out);

/**
 * # Safety
 * `p` must come from a problem constructor and not be freed twice.
 */
void cpdyn_problem_free(struct CpdynProblem *p);

/**
 * Gaussian factors with the given entry std; `balanced` rescales each
 * component to equal vector norms.
 *
 * # Safety
 * `dims` must hold `order` values.
 */
enum CpdynStatus cpdyn_factorization_random(const size_t *dims,
                                            size_t order,
                                            size_t rank,
                                            double std,
                                            bool balanced,
                                            uint64_t seed,
                                            struct CpdynFactorization **out);

/**
 * Factorization from concatenated factor matrices (`Σ_n d_n · rank`
 * values).
 *
 * # Safety
 * `dims` must hold `order` values and `factors` the stated count.
 */
enum CpdynStatus cpdyn_factorization_from_factors(const size_t *dims,
                                                  size_t order,
                                                  size_t rank,
                                                  const double *factors,
                                                  size_t len,
                                                  struct CpdynFactorization **out);

/**
 * # Safety
 * `f` must be a live handle or null.
 */
size_t cpdyn_factorization_rank(const struct CpdynFactorization *f);

/**
 * # Safety
 * `f` must be a live handle or null.
 */
size_t cpdyn_factorization_order(const struct CpdynFactorization *f);

/**
 * Copies the `d_n × R` factor matrix of mode `mode`.
 *
 * # Safety
 * `buf` must hold `len` values.
 */
enum CpdynStatus cpdyn_factorization_factor(const struct CpdynFactorization *f,
                                            size_t mode,
                                            double *buf,
                                            size_t len);

/**
 * Component norms `σ_r`, one per component.
 *
 * # Safety
 * `buf` must hold `len` values.
 */
enum CpdynStatus cpdyn_factorization_component_norms(const struct CpdynFactorization *f,
                                                     double *buf,
                                                     size_t len);

/**
 * The dense end tensor, row-major.
 *
 * # Safety
 * `buf` must hold `len` values.
 */
enum CpdynStatus cpdyn_factorization_end_tensor(const struct CpdynFactorization *f,
                                                double *buf,
                                                size_t len);

/**
 * Largest gap between squared vector norms within a component.
 *
 * # Safety
 * `out` must be writable.
 */
enum CpdynStatus cpdyn_factorization_unbalancedness(const struct CpdynFactorization *f,
                                                    double *out);

/**
 * # Safety
 * `f` must come from this library and not be freed twice.
 */
void cpdyn_factorization_free(struct CpdynFactorization *f);

/**
 * Objective value.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum CpdynStatus cpdyn_loss(const struct CpdynFactorization *f,
                            const struct CpdynProblem *p,
                            struct CpdynLoss loss,
                            double *out);

/**
 * Objective gradient in the concatenated factor layout.
 *
 * # Safety
 * Handles must be live; `buf` must hold `len` values.
 */
enum CpdynStatus cpdyn_gradient(const struct CpdynFactorization *f,
                                const struct CpdynProblem *p,
                                struct CpdynLoss loss,
                                double *buf,
                                size_t len);

/**
 * `⟨−∇L, unit component tensor r⟩`, zero for a component with a zero
 * vector.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum CpdynStatus cpdyn_gamma(const struct CpdynFactorization *f,
                             const struct CpdynProblem *p,
                             struct CpdynLoss loss,
                             size_t component,
                             double *out);

/**
 * Trainer over copies of `f` and `p`. `adaptive` selects the
 * running-average step size with base `lr`; otherwise `lr` is fixed.
 *
 * # Safety
 * Handles must be live; `out` writable.
 */
enum CpdynStatus cpdyn_trainer_new(const struct CpdynFactorization *f,
                                   const struct CpdynProblem *p,
                                   struct CpdynLoss loss,
                                   double lr,
                                   bool adaptive,
                                   struct CpdynTrainer **out);

/**
 * Takes `steps` gradient steps and writes the loss after them.
 *
 * # Safety
 * `t` must be live; `loss_out` writable or null.
 */
enum CpdynStatus cpdyn_trainer_run(struct CpdynTrainer *t, uint64_t steps, double *loss_out);

/**
 * Steps taken so far.
 *
 * # Safety
 * `t` must be live or null.
 */
uint64_t cpdyn_trainer_iterations(const struct CpdynTrainer *t);

/**
 * Sum of step sizes so far.
 *
 * # Safety
 * `t` must be live or null.
 */
double cpdyn_trainer_time(const struct CpdynTrainer *t);

/**
 * New handle holding a copy of the current factorization.
 *
 * # Safety
 * `t` must be live; `out` writable.
 */
enum CpdynStatus cpdyn_trainer_factorization(const struct CpdynTrainer *t,
                                             struct CpdynFactorization **out);

/**
 * # Safety
 * `t` must come from [`cpdyn_trainer_new`] and not be freed twice.
 */
void cpdyn_trainer_free(struct CpdynTrainer *t);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPDYN_H */
