#ifndef TISSUE_H
#define TISSUE_H

/* Generated by cbindgen from tissue-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Anything but `Ok` leaves a message for
 * [`tissue_last_error`].
 */
typedef enum TissueStatus {
  TISSUE_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  TISSUE_STATUS_NULL_ARG = 1,
  /**
   * An argument failed validation (bad antigen value, signal index,
   * out-of-range index).
   */
  TISSUE_STATUS_INVALID_ARG = 2,
  /**
   * A parameter file could not be read or parsed.
   */
  TISSUE_STATUS_PARSE_ERROR = 3,
  /**
   * The simulation itself failed.
   */
  TISSUE_STATUS_RUNTIME_ERROR = 4,
} TissueStatus;

/**
 * An opaque simulation handle. Not thread-safe; confine each handle to
 * one thread or lock around it.
 */
typedef struct TissueSim TissueSim;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Builds a simulation with the built-in parameters.
 *
 * # Safety
 * `out` must point to writable storage for one pointer.
 */
enum TissueStatus tissue_sim_new_default(uint64_t seed,
                                         bool signal_enabled,
                                         struct TissueSim **out);

/**
 * Builds a simulation from a parameter file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` must point to
 * writable storage for one pointer.
 */
enum TissueStatus tissue_sim_new_from_file(const char *path, uint64_t seed, struct TissueSim **out);

/**
 * Frees a simulation. Passing null is a no-op.
 *
 * # Safety
 * `sim` must have come from a `tissue_sim_new_*` call and must not be
 * used afterwards.
 */
void tissue_sim_free(struct TissueSim *sim);

/**
 * Queues one antigen value; it enters the tissue on the next tick.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`.
 */
enum TissueStatus tissue_sim_ingest_antigen(struct TissueSim *sim, uint32_t value);

/**
 * Queues one signal assignment; it applies on the next tick.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`.
 */
enum TissueStatus tissue_sim_set_signal(struct TissueSim *sim, size_t index, double level);

/**
 * Advances the simulation one tick.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`.
 */
enum TissueStatus tissue_sim_tick(struct TissueSim *sim);

/**
 * Advances the simulation `ticks` ticks in virtual time.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`.
 */
enum TissueStatus tissue_sim_step(struct TissueSim *sim, uint64_t ticks);

/**
 * Ticks run so far.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`; null reads 0.
 */
uint64_t tissue_sim_tick_count(const struct TissueSim *sim);

/**
 * Responses recorded so far.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`; null reads 0.
 */
size_t tissue_sim_response_count(const struct TissueSim *sim);

/**
 * Copies response `index` into the non-null out parameters.
 *
 * # Safety
 * `sim` must be a live handle from `tissue_sim_new_*`; each non-null
 * out pointer must be writable.
 */
enum TissueStatus tissue_sim_response_at(const struct TissueSim *sim,
                                         size_t index,
                                         uint64_t *tick_out,
                                         size_t *cell_out,
                                         uint32_t *value_out);

/**
 * The message for the calling thread's most recent failure. The pointer
 * stays valid until the next failing call on this thread. Empty before
 * any failure.
 */
const char *tissue_last_error(void);

/**
 * The library version as a static string.
 */
const char *tissue_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TISSUE_H */
