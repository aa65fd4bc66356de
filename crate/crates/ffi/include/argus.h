#ifndef ARGUS_H
#define ARGUS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum ArgusStatus {
  ARGUS_STATUS_OK = 0,
  /**
   * Malformed or invalid configuration.
   */
  ARGUS_STATUS_CONFIG_ERROR = 1,
  /**
   * The run produced a non-finite or exploding iterate; it cannot step further.
   */
  ARGUS_STATUS_DIVERGED = 2,
  ARGUS_STATUS_NULL_POINTER = 3,
  ARGUS_STATUS_INVALID_ARGUMENT = 4,
  ARGUS_STATUS_IO_ERROR = 5,
  /**
   * The run already completed `T` iterations.
   */
  ARGUS_STATUS_FINISHED = 6,
  ARGUS_STATUS_PANIC = 7,
} ArgusStatus;

/**
 * Opaque simulation handle.
 */
typedef struct ArgusRun ArgusRun;

/**
 * One row of the metrics trace.
 */
typedef struct ArgusMetrics {
  uint64_t t;
  double psi;
  double gap_sq;
  double consensus;
  double upper_loss;
  double lower_loss;
  double task_metric;
  uint64_t active_count;
  double avg_cuts;
  double comm_bits_cum;
  double flops_cum;
  double virtual_time;
} ArgusMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or null. The pointer
 * stays valid until the next argus call on the same thread.
 */
const char *argus_last_error(void);

/**
 * Builds a run from a JSON configuration string.
 *
 * # Safety
 * `config_json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum ArgusStatus argus_run_new(const char *config_json, struct ArgusRun **out);

/**
 * Advances one iteration and optionally copies its metrics into `out`.
 *
 * # Safety
 * `run` must come from `argus_run_new`; `out` may be null.
 */
enum ArgusStatus argus_run_step(struct ArgusRun *run, struct ArgusMetrics *out);

/**
 * Steps until the run finishes or fails.
 *
 * # Safety
 * `run` must come from `argus_run_new`.
 */
enum ArgusStatus argus_run_to_end(struct ArgusRun *run);

/**
 * Number of completed iterations; 0 for a null handle.
 *
 * # Safety
 * `run` must be null or come from `argus_run_new`.
 */
uint64_t argus_run_iteration(const struct ArgusRun *run);

/**
 * Copies the metrics of iteration `t` (1-based) into `out`.
 *
 * # Safety
 * `run` must come from `argus_run_new` and `out` must be valid.
 */
enum ArgusStatus argus_run_metrics(const struct ArgusRun *run,
                                   uint64_t t,
                                   struct ArgusMetrics *out);

/**
 * Writes the trace so far as `metrics.csv`-format text to `path`.
 *
 * # Safety
 * `run` must come from `argus_run_new`; `path` must be NUL-terminated.
 */
enum ArgusStatus argus_run_write_csv(const struct ArgusRun *run, const char *path);

/**
 * Releases a run. Null is ignored.
 *
 * # Safety
 * `run` must be null or come from `argus_run_new`, and not be used afterwards.
 */
void argus_run_free(struct ArgusRun *run);

/**
 * Soft-thresholding of `len` values: `out_k = sign(v_k) max(|v_k| - s, 0)`.
 * `out` may alias `v`.
 *
 * # Safety
 * `v` and `out` must point to `len` doubles.
 */
enum ArgusStatus argus_prox_l1(const double *v, size_t len, double s, double *out);

/**
 * `rho = ||W - (1/n) 1 1^T||_2` for a symmetric row-major `n x n` matrix.
 *
 * # Safety
 * `w` must point to `n * n` doubles and `out` to one.
 */
enum ArgusStatus argus_spectral_gap(const double *w, size_t n, double *out);

/**
 * Library version, static storage.
 */
const char *argus_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ARGUS_H */
