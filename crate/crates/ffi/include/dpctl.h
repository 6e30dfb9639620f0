#ifndef DPCTL_H
#define DPCTL_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 4 match the exit codes of the `dpctl` CLI.
 */
typedef enum DpctlStatus {
  DPCTL_STATUS_OK = 0,
  /**
   * Null pointer, invalid UTF-8 or a too-small buffer.
   */
  DPCTL_STATUS_BAD_ARGUMENT = 1,
  DPCTL_STATUS_VALIDATION = 2,
  DPCTL_STATUS_INFEASIBLE = 3,
  DPCTL_STATUS_NUMERICAL = 4,
  DPCTL_STATUS_PANIC = 5,
} DpctlStatus;

/**
 * Gain matrices of a controller.
 */
typedef enum DpctlGain {
  DPCTL_GAIN_G1 = 0,
  DPCTL_GAIN_G2 = 1,
  DPCTL_GAIN_L1 = 2,
  DPCTL_GAIN_AC_BAR = 3,
  DPCTL_GAIN_AR_BAR = 4,
} DpctlGain;

/**
 * Opaque privacy-preserving tracking controller.
 */
typedef struct DpctlController DpctlController;

/**
 * Opaque discrete-time state-space system.
 */
typedef struct DpctlSystem DpctlSystem;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *dpctl_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated,
 * always NUL-terminated when `len > 0`). Returns the full message length
 * plus one, so a caller can size the buffer.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t dpctl_last_error(char *buf, size_t len);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string returned by a `dpctl_*` function, not yet freed.
 */
void dpctl_string_free(char *s);

/**
 * Builds a system from row-major `A` (n×n), `B` (n×m), `C` (q×n), `D` (q×m).
 * Pointers for empty matrices may be null.
 *
 * # Safety
 * Each matrix pointer must reference the stated number of doubles; `out` must be writable.
 */
enum DpctlStatus dpctl_system_new(size_t n,
                                  size_t m,
                                  size_t q,
                                  const double *a,
                                  const double *b,
                                  const double *c,
                                  const double *d,
                                  struct DpctlSystem **out_system);

/**
 * Parses a system from JSON `{"A": [[..]], "B": .., "C": .., "D": ..}`.
 *
 * # Safety
 * `json` must be a NUL-terminated string; `out_system` must be writable.
 */
enum DpctlStatus dpctl_system_from_json(const char *json, struct DpctlSystem **out_system);

/**
 * Serializes a system to JSON; free the result with [`dpctl_string_free`].
 *
 * # Safety
 * `system` must be a live handle; `out_json` must be writable.
 */
enum DpctlStatus dpctl_system_to_json(const struct DpctlSystem *system, char **out_json);

/**
 * # Safety
 * `system` must be a live handle; the out pointers must be writable.
 */
enum DpctlStatus dpctl_system_dims(const struct DpctlSystem *system,
                                   size_t *out_n,
                                   size_t *out_m,
                                   size_t *out_q);

/**
 * # Safety
 * `system` must be null or a handle from this library, not yet freed.
 */
void dpctl_system_free(struct DpctlSystem *system);

/**
 * Gaussian mechanism constant `R(ε, δ)`.
 *
 * # Safety
 * `out_r` must be writable.
 */
enum DpctlStatus dpctl_r_value(double epsilon, double delta, double *out_r);

/**
 * Smallest i.i.d. output noise standard deviation giving (ε, δ)-privacy
 * over horizon `t` for adjacency bound `c`.
 *
 * # Safety
 * `system` must be a live handle; `out_sigma` must be writable.
 */
enum DpctlStatus dpctl_min_iid_sigma(const struct DpctlSystem *system,
                                     double epsilon,
                                     double delta,
                                     double c,
                                     size_t t,
                                     double *out_sigma);

/**
 * Laplace scale `b` giving ε-privacy over horizon `t` for a single-output system.
 *
 * # Safety
 * `system` must be a live handle; `out_scale` must be writable.
 */
enum DpctlStatus dpctl_laplace_scale(const struct DpctlSystem *system,
                                     double epsilon,
                                     double c,
                                     size_t t,
                                     double *out_scale);

/**
 * H∞ norm of a Schur-stable system.
 *
 * # Safety
 * `system` must be a live handle; `out_norm` must be writable.
 */
enum DpctlStatus dpctl_hinf_norm(const struct DpctlSystem *system, double tol, double *out_norm);

/**
 * Rank test for strong input observability.
 *
 * # Safety
 * `system` must be a live handle; `out_observable` must be writable.
 */
enum DpctlStatus dpctl_is_strongly_input_observable(const struct DpctlSystem *system,
                                                    bool *out_observable);

/**
 * Designs a privacy-preserving tracking controller with H∞ bound `gamma`
 * from `e` to `u_p`. With `least_squares` the regulator equations may be
 * solved approximately.
 *
 * # Safety
 * `plant` and `exo` must be live handles; `out_controller` must be writable.
 */
enum DpctlStatus dpctl_controller_design(const struct DpctlSystem *plant,
                                         const struct DpctlSystem *exo,
                                         double gamma,
                                         bool least_squares,
                                         struct DpctlController **out_controller);

/**
 * # Safety
 * `json` must be a NUL-terminated string; `out_controller` must be writable.
 */
enum DpctlStatus dpctl_controller_from_json(const char *json,
                                            struct DpctlController **out_controller);

/**
 * # Safety
 * `controller` must be a live handle; `out_json` must be writable.
 */
enum DpctlStatus dpctl_controller_to_json(const struct DpctlController *controller,
                                          char **out_json);

/**
 * Certified bound and swept H∞ norm from `e` to `u_p`.
 *
 * # Safety
 * `controller` must be a live handle; the out pointers must be writable.
 */
enum DpctlStatus dpctl_controller_hinf(const struct DpctlController *controller,
                                       double *out_gamma,
                                       double *out_hinf);

/**
 * Copies a gain matrix row-major into `buf`. The shape is always written;
 * the data only when `len` is large enough, otherwise `BadArgument` is
 * returned. Pass a null `buf` to query the shape.
 *
 * # Safety
 * `controller` must be a live handle; `buf` must be null or hold `len`
 * doubles; the shape pointers must be writable.
 */
enum DpctlStatus dpctl_controller_gain(const struct DpctlController *controller,
                                       enum DpctlGain which,
                                       double *buf,
                                       size_t len,
                                       size_t *out_rows,
                                       size_t *out_cols);

/**
 * # Safety
 * `controller` must be null or a handle from this library, not yet freed.
 */
void dpctl_controller_free(struct DpctlController *controller);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPCTL_H */
