#ifndef SLOWBOND_H
#define SLOWBOND_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call. `Usage` and `Refused` are caller errors; the
// message is available from [`sb_last_error_message`].
typedef enum SbStatus {
  SB_STATUS_OK = 0,
  SB_STATUS_NULL_POINTER = 1,
  SB_STATUS_USAGE = 2,
  SB_STATUS_NUMERICAL = 3,
  SB_STATUS_REFUSED = 4,
  SB_STATUS_PANIC = 5,
  SB_STATUS_INTERNAL = 6,
} SbStatus;

// Regime selector for the closed forms and the PDE boundary condition.
typedef enum SbRegime {
  // `beta < 1`: periodic.
  SB_REGIME_SUB = 0,
  // `beta = 1`: Robin with the given `alpha`.
  SB_REGIME_CRITICAL = 1,
  // `beta > 1`: Neumann.
  SB_REGIME_SUPER = 2,
} SbRegime;

typedef struct SbGrid SbGrid;

typedef struct SbParams SbParams;

typedef struct SbTrajectory SbTrajectory;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len`) and returns the full message length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t sb_last_error_message(char *buf, size_t len);

// Creates model parameters. `beta` is ignored when `beta_infinite` is set.
//
// # Safety
// `out` must be a valid pointer to a handle slot.
enum SbStatus sb_params_new(size_t n,
                            double alpha,
                            double beta,
                            bool beta_infinite,
                            struct SbParams **out_params);

// # Safety
// `params` must be null or a handle from [`sb_params_new`] not yet freed.
void sb_params_free(struct SbParams *params);

// Rate of the slow bond, `alpha * n^-beta` (0 for `beta = inf`).
//
// # Safety
// `params` must be a live handle and `out_rate` a valid pointer.
enum SbStatus sb_params_slow_rate(const struct SbParams *params, double *out_rate);

// Runs one trajectory to macro time `horizon` (micro time `horizon * n^2`)
// from the 0/1 occupancy `init[0..sites]`.
//
// `bonds[0..n_bonds]` are watched for currents; `tagged_site < 0` disables
// the tagged particle.
//
// # Safety
// Pointers must be valid for the stated lengths; `out_traj` must be a valid
// handle slot.
enum SbStatus sb_simulate(const struct SbParams *params,
                          const uint8_t *init,
                          size_t sites,
                          double horizon,
                          uint64_t seed,
                          const size_t *bonds,
                          size_t n_bonds,
                          int64_t tagged_site,
                          struct SbTrajectory **out_traj);

// # Safety
// `traj` must be null or a handle from [`sb_simulate`] not yet freed.
void sb_trajectory_free(struct SbTrajectory *traj);

// # Safety
// `traj` must be a live handle and `out_events` a valid pointer.
enum SbStatus sb_trajectory_events(const struct SbTrajectory *traj, uint64_t *out_events);

// Copies the final occupancy into `buf`, which must hold `len >= sites`
// bytes.
//
// # Safety
// `traj` must be a live handle and `buf` valid for `len` writes.
enum SbStatus sb_trajectory_final_config(const struct SbTrajectory *traj, uint8_t *buf, size_t len);

// Net current through the `index`-th watched bond.
//
// # Safety
// `traj` must be a live handle and `out_current` a valid pointer.
enum SbStatus sb_trajectory_current(const struct SbTrajectory *traj,
                                    size_t index,
                                    int64_t *out_current);

// Net displacement of the tagged particle.
//
// # Safety
// `traj` must be a live handle and `out_disp` a valid pointer.
enum SbStatus sb_trajectory_tagged_displacement(const struct SbTrajectory *traj, int64_t *out_disp);

// Solves the hydrodynamic equation of `regime` on `[0, 1]` with `m` cells.
// The initial profile interpolates `rho0[0..len]` placed at equally spaced
// points `j / (len - 1)`.
//
// # Safety
// `rho0` must be valid for `len` reads and `out_grid` a valid handle slot.
enum SbStatus sb_pde_solve(enum SbRegime regime_kind,
                           double alpha,
                           const double *rho0,
                           size_t len,
                           size_t m,
                           double t_final,
                           double dt,
                           struct SbGrid **out_grid);

// # Safety
// `grid` must be null or a handle from [`sb_pde_solve`] not yet freed.
void sb_grid_free(struct SbGrid *grid);

// Number of cells `m` and time steps; the grid has `m + 1` nodes and
// `steps + 1` time levels.
//
// # Safety
// `grid` must be a live handle; the out-pointers must be valid.
enum SbStatus sb_grid_shape(const struct SbGrid *grid, size_t *out_m, size_t *out_steps);

// Copies time level `k` (`m + 1` values) into `buf`.
//
// # Safety
// `grid` must be a live handle and `buf` valid for `len` writes.
enum SbStatus sb_grid_row(const struct SbGrid *grid, size_t k, double *buf, size_t len);

// Trapezoid mass of time level `k`.
//
// # Safety
// `grid` must be a live handle and `out_mass` a valid pointer.
enum SbStatus sb_grid_mass(const struct SbGrid *grid, size_t k, double *out_mass);

// `Phi(t, x) = P(N(0, 2t) >= x)`.
//
// # Safety
// `out_value` must be a valid pointer.
enum SbStatus sb_phi(double t, double x, double *out_value);

// `chi(rho) = rho (1 - rho)`.
//
// # Safety
// `out_value` must be a valid pointer.
enum SbStatus sb_chi(double rho, double *out_value);

// Limiting variance of the rescaled current through `u` at time `t`.
//
// # Safety
// `out_value` must be a valid pointer.
enum SbStatus sb_current_variance(enum SbRegime regime_kind,
                                  double alpha,
                                  double rho,
                                  double u,
                                  double t,
                                  double *out_value);

// Limiting variance of the rescaled tagged displacement. `printed_form`
// selects the alternative normalisation of the critical case.
//
// # Safety
// `out_value` must be a valid pointer.
enum SbStatus sb_tagged_variance(enum SbRegime regime_kind,
                                 double alpha,
                                 double rho,
                                 double u,
                                 double t,
                                 bool printed_form,
                                 double *out_value);

// Max-norm of `nu_rho L` for the exact generator; needs `n <= 12`.
//
// # Safety
// `params` must be a live handle and `out_value` a valid pointer.
enum SbStatus sb_stationarity_residual(const struct SbParams *params,
                                       double rho,
                                       double *out_value);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLOWBOND_H */
