#ifndef TRAJCAST_H
#define TRAJCAST_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result codes. Zero is success.
 */
typedef enum TcStatus {
  TC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TC_STATUS_NULL_ARGUMENT = 1,
  /**
   * Lengths or values outside the documented range.
   */
  TC_STATUS_INVALID_ARGUMENT = 2,
  TC_STATUS_IO = 3,
  TC_STATUS_PARSE = 4,
  TC_STATUS_CONFIG = 5,
  TC_STATUS_DATA = 6,
  TC_STATUS_CHECKPOINT = 7,
  /**
   * Numerical or internal failure.
   */
  TC_STATUS_INTERNAL = 8,
  /**
   * A Rust panic was caught at the boundary.
   */
  TC_STATUS_PANIC = 9,
} TcStatus;

/**
 * Candidate selection for [`tc_min_of_k`].
 */
typedef enum TcSelect {
  /**
   * minADE and minFDE taken independently.
   */
  TC_SELECT_MIN_ADE = 0,
  /**
   * The lowest-FDE candidate's ADE and FDE.
   */
  TC_SELECT_MIN_FDE_THEN_ADE = 1,
} TcSelect;

/**
 * Opaque predictor loaded from a model checkpoint.
 */
typedef struct TcPredictor TcPredictor;

typedef struct TcPoint {
  double x;
  double y;
} TcPoint;

/**
 * Axis-aligned scene extent in world units, before the density margin.
 */
typedef struct TcBounds {
  double min_x;
  double min_y;
  double max_x;
  double max_y;
} TcBounds;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *tc_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *tc_version(void);

/**
 * Average displacement between two `len`-point trajectories.
 *
 * # Safety
 * `pred` and `truth` must point to `len` readable points; `out` must be
 * writable.
 */
enum TcStatus tc_ade(const struct TcPoint *pred,
                     const struct TcPoint *truth,
                     uintptr_t len,
                     double *out_value);

/**
 * Displacement at the final step.
 *
 * # Safety
 * As for [`tc_ade`].
 */
enum TcStatus tc_fde(const struct TcPoint *pred,
                     const struct TcPoint *truth,
                     uintptr_t len,
                     double *out_value);

/**
 * Best-of-K over `k` candidates laid out `[k][len]`.
 *
 * # Safety
 * `preds` must hold `k * len` points and `truth` `len` points; the three
 * outputs must be writable.
 */
enum TcStatus tc_min_of_k(const struct TcPoint *preds,
                          uintptr_t k,
                          const struct TcPoint *truth,
                          uintptr_t len,
                          enum TcSelect select,
                          double *out_ade,
                          double *out_fde,
                          uintptr_t *out_index);

/**
 * KDE negative log-likelihood of `truth` under `num_samples` sampled
 * trajectories laid out `[num_samples][len]`, with default bandwidth
 * settings.
 *
 * # Safety
 * `samples` must hold `num_samples * len` points and `truth` `len`.
 */
enum TcStatus tc_kde_nll(const struct TcPoint *samples,
                         uintptr_t num_samples,
                         const struct TcPoint *truth,
                         uintptr_t len,
                         double *out_value);

/**
 * Loads a model checkpoint. The density settings recorded with it are
 * used when rendering scene maps; defaults apply if none were recorded.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string and `out_handle` writable.
 * Release the handle with [`tc_predictor_free`].
 */
enum TcStatus tc_predictor_load(const char *path, struct TcPredictor **out_handle);

/**
 * # Safety
 * `handle` must come from [`tc_predictor_load`] and not be used again.
 * Null is ignored.
 */
void tc_predictor_free(struct TcPredictor *handle);

/**
 * Observed steps the model expects (0 for a null handle).
 *
 * # Safety
 * `handle` must be null or a live predictor.
 */
uintptr_t tc_predictor_history_len(const struct TcPredictor *handle);

/**
 * Predicted steps per candidate (0 for a null handle).
 *
 * # Safety
 * `handle` must be null or a live predictor.
 */
uintptr_t tc_predictor_horizon(const struct TcPredictor *handle);

/**
 * Candidates produced for a request of `k` (1 for deterministic models).
 *
 * # Safety
 * `handle` must be null or a live predictor.
 */
uintptr_t tc_predictor_candidates(const struct TcPredictor *handle, uintptr_t k);

/**
 * Predicts futures for one agent.
 *
 * `observed` holds the agent's `history_len` positions, `dt` seconds
 * apart. For models with the relation module, `scene_points` holds every
 * agent present at each observed step (the target included), concatenated
 * step by step, with `scene_counts[t]` points at step `t`; `bounds` is the
 * scene extent. Other models ignore these and accept nulls.
 *
 * Writes `tc_predictor_candidates(k) * horizon` points to `out_points`
 * (laid out `[candidate][step]`) and the candidate count to
 * `out_candidates`. The same `seed` gives the same output.
 *
 * # Safety
 * Pointers must reference arrays of the stated lengths; `out_points` must
 * have room for `out_capacity` points.
 */
enum TcStatus tc_predictor_predict(const struct TcPredictor *handle,
                                   const struct TcPoint *observed,
                                   uintptr_t history_len,
                                   const struct TcPoint *scene_points,
                                   const uintptr_t *scene_counts,
                                   struct TcBounds bounds,
                                   double dt,
                                   uintptr_t k,
                                   uint64_t seed,
                                   struct TcPoint *out_points,
                                   uintptr_t out_capacity,
                                   uintptr_t *out_candidates);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJCAST_H */
