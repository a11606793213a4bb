#ifndef LOCKSIM_H
#define LOCKSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Zero is success.
 */
typedef enum LsStatus {
  LS_STATUS_OK = 0,
  LS_STATUS_NULL_POINTER = 1,
  /**
   * Bad argument or configuration; nothing was computed.
   */
  LS_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The computation ran but failed (fit, calibration, resource limit).
   */
  LS_STATUS_NUMERICAL = 3,
  LS_STATUS_IO = 4,
  LS_STATUS_INVALID_UTF8 = 5,
  /**
   * A Rust panic was caught at the boundary.
   */
  LS_STATUS_PANIC = 6,
} LsStatus;

/**
 * Opaque superhyperfine pathway report.
 */
typedef struct LsShfReport LsShfReport;

/**
 * Opaque ensemble trace.
 */
typedef struct LsTrace LsTrace;

/**
 * Bloch vector (u, v, w).
 */
typedef struct LsBloch {
  double u;
  double v;
  double w;
} LsBloch;

/**
 * Fitted A(t) = a0 exp(-t / t_dec).
 */
typedef struct LsDecayFit {
  double a0;
  double t_dec;
  double stderr_a0;
  double stderr_t_dec;
  double residual_rms;
} LsDecayFit;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next `ls_` call on the same thread.
 */
const char *ls_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *ls_version(void);

/**
 * Exact lossless evolution for `dt` seconds under drive `chi` (rad/s) at
 * `phase` (rad) and detuning `delta` (rad/s).
 *
 * # Safety
 * `out` must be NULL or point to writable memory for one `LsBloch`.
 */
enum LsStatus ls_rotate(struct LsBloch state,
                        double chi,
                        double phase,
                        double delta,
                        double dt,
                        struct LsBloch *out);

/**
 * Runs the sequence described by a JSON run configuration (the same
 * document the command line accepts) and returns its averaged trace.
 * Without a `seed` field the seed is 0.
 *
 * # Safety
 * `config_json` must be NULL or a NUL-terminated string; `out` must be NULL
 * or point to writable memory for one pointer.
 */
enum LsStatus ls_simulate_json(const char *config_json, struct LsTrace **out);

/**
 * Number of samples in `trace`, or 0 if it is NULL.
 *
 * # Safety
 * `trace` must be NULL or a live pointer from [`ls_simulate_json`].
 */
size_t ls_trace_len(const struct LsTrace *trace);

/**
 * Copies the trace into caller buffers of `len` elements each. `len` must
 * equal [`ls_trace_len`]. Any of the three buffers may be NULL to skip it.
 *
 * # Safety
 * Each non-NULL buffer must hold `len` writable doubles.
 */
enum LsStatus ls_trace_copy(const struct LsTrace *trace,
                            double *times,
                            double *i,
                            double *q,
                            size_t len);

/**
 * # Safety
 * `trace` must be NULL or a pointer from [`ls_simulate_json`] not yet freed.
 */
void ls_trace_free(struct LsTrace *trace);

/**
 * Least-squares exponential fit of `n` (t, y) points.
 *
 * # Safety
 * `t` and `y` must hold `n` readable doubles; `out` must be writable.
 */
enum LsStatus ls_fit_exponential(const double *t,
                                 const double *y,
                                 size_t n,
                                 struct LsDecayFit *out);

/**
 * Analyses a cluster given as JSON (same layout as the command line's
 * cluster file), or the built-in five-nucleus preset when `cluster_json`
 * is NULL.
 *
 * # Safety
 * `cluster_json` must be NULL or NUL-terminated; `out` must be writable.
 */
enum LsStatus ls_shf_analyze(const char *cluster_json, double threshold, struct LsShfReport **out);

/**
 * # Safety
 * `report` must be NULL or a live pointer from [`ls_shf_analyze`].
 */
size_t ls_shf_pathway_count(const struct LsShfReport *report);

/**
 * # Safety
 * `report` must be NULL or a live pointer from [`ls_shf_analyze`].
 */
double ls_shf_side_hole_weight(const struct LsShfReport *report);

/**
 * Side dimension of the square strength table (2^n for n nuclei).
 *
 * # Safety
 * `report` must be NULL or a live pointer from [`ls_shf_analyze`].
 */
size_t ls_shf_dim(const struct LsShfReport *report);

/**
 * Copies the strength table row-major into `buf` of `dim * dim` doubles.
 *
 * # Safety
 * `buf` must hold `len` writable doubles.
 */
enum LsStatus ls_shf_strengths(const struct LsShfReport *report, double *buf, size_t len);

/**
 * # Safety
 * `report` must be NULL or a pointer from [`ls_shf_analyze`] not yet freed.
 */
void ls_shf_free(struct LsShfReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LOCKSIM_H */
