//! C ABI for the slowbond library.
//!
//! Every entry point returns an [`SbStatus`]; results go through out-pointers.
//! On failure the message is kept per thread and can be read back with
//! [`sb_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::c_char;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use slowbond::closed_forms::{self, TaggedForm};
use slowbond::engine::{simulate, ObserverSet, Trajectory};
use slowbond::generator::{build_generator, stationarity_residual};
use slowbond::lattice::{Beta, Configuration, DensityProfile, SlowBondParams};
use slowbond::pde::{self, BoundaryCondition, GridSolution, SolverOptions};
use slowbond::sbeta::Regime;
use slowbond::Error;

/// Result of every call. `Usage` and `Refused` are caller errors; the
/// message is available from [`sb_last_error_message`].
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbStatus {
    Ok = 0,
    NullPointer = 1,
    Usage = 2,
    Numerical = 3,
    Refused = 4,
    Panic = 5,
    Internal = 6,
}

/// Regime selector for the closed forms and the PDE boundary condition.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SbRegime {
    /// `beta < 1`: periodic.
    Sub = 0,
    /// `beta = 1`: Robin with the given `alpha`.
    Critical = 1,
    /// `beta > 1`: Neumann.
    Super = 2,
}

pub struct SbParams(SlowBondParams);

pub struct SbTrajectory(Trajectory);

pub struct SbGrid(GridSolution);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(err: &Error) -> SbStatus {
    match err {
        Error::Usage(_) => SbStatus::Usage,
        Error::Numerical(_) => SbStatus::Numerical,
        Error::Refused(_) => SbStatus::Refused,
        _ => SbStatus::Internal,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> SbStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => {
            set_error(String::new());
            SbStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SbStatus::NullPointer
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SbStatus::Panic
        }
    }
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

unsafe fn get<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        Ok(&[])
    } else if p.is_null() {
        Err(Fail::Null(what))
    } else {
        Ok(std::slice::from_raw_parts(p, len))
    }
}

fn regime(kind: SbRegime, alpha: f64) -> Result<Regime, Error> {
    match kind {
        SbRegime::Sub => Ok(Regime::Sub),
        SbRegime::Critical => Regime::critical(alpha),
        SbRegime::Super => Ok(Regime::Super),
    }
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`) and returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sb_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates model parameters. `beta` is ignored when `beta_infinite` is set.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn sb_params_new(
    n: usize,
    alpha: f64,
    beta: f64,
    beta_infinite: bool,
    out_params: *mut *mut SbParams,
) -> SbStatus {
    guard(|| {
        let slot = out(out_params, "out_params")?;
        let beta = if beta_infinite {
            Beta::Infinite
        } else {
            Beta::Finite(beta)
        };
        let params = SlowBondParams::new(n, alpha, beta)?;
        *slot = Box::into_raw(Box::new(SbParams(params)));
        Ok(())
    })
}

/// # Safety
/// `params` must be null or a handle from [`sb_params_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_params_free(params: *mut SbParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Rate of the slow bond, `alpha * n^-beta` (0 for `beta = inf`).
///
/// # Safety
/// `params` must be a live handle and `out_rate` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_params_slow_rate(params: *const SbParams, out_rate: *mut f64) -> SbStatus {
    guard(|| {
        let p = get(params, "params")?;
        *out(out_rate, "out_rate")? = p.0.slow_rate();
        Ok(())
    })
}

/// Runs one trajectory to macro time `horizon` (micro time `horizon * n^2`)
/// from the 0/1 occupancy `init[0..sites]`.
///
/// `bonds[0..n_bonds]` are watched for currents; `tagged_site < 0` disables
/// the tagged particle.
///
/// # Safety
/// Pointers must be valid for the stated lengths; `out_traj` must be a valid
/// handle slot.
#[no_mangle]
pub unsafe extern "C" fn sb_simulate(
    params: *const SbParams,
    init: *const u8,
    sites: usize,
    horizon: f64,
    seed: u64,
    bonds: *const usize,
    n_bonds: usize,
    tagged_site: i64,
    out_traj: *mut *mut SbTrajectory,
) -> SbStatus {
    guard(|| {
        let p = get(params, "params")?;
        let init = slice(init, sites, "init")?;
        let bonds = slice(bonds, n_bonds, "bonds")?;
        let slot = out(out_traj, "out_traj")?;
        let config = Configuration::from_occupancy(init.to_vec())?;
        let observers = ObserverSet {
            watched_bonds: bonds.to_vec(),
            tagged_site: usize::try_from(tagged_site).ok(),
        };
        let traj = simulate(p.0, config, horizon, seed, &observers, &[])?;
        *slot = Box::into_raw(Box::new(SbTrajectory(traj)));
        Ok(())
    })
}

/// # Safety
/// `traj` must be null or a handle from [`sb_simulate`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_trajectory_free(traj: *mut SbTrajectory) {
    if !traj.is_null() {
        drop(Box::from_raw(traj));
    }
}

/// # Safety
/// `traj` must be a live handle and `out_events` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_trajectory_events(traj: *const SbTrajectory, out_events: *mut u64) -> SbStatus {
    guard(|| {
        *out(out_events, "out_events")? = get(traj, "traj")?.0.events;
        Ok(())
    })
}

/// Copies the final occupancy into `buf`, which must hold `len >= sites`
/// bytes.
///
/// # Safety
/// `traj` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sb_trajectory_final_config(traj: *const SbTrajectory, buf: *mut u8, len: usize) -> SbStatus {
    guard(|| {
        let occ = get(traj, "traj")?.0.final_config.occupancy();
        if len < occ.len() {
            return Err(Error::Usage(format!("buffer holds {len} sites, need {}", occ.len())).into());
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(occ.as_ptr(), buf, occ.len());
        Ok(())
    })
}

/// Net current through the `index`-th watched bond.
///
/// # Safety
/// `traj` must be a live handle and `out_current` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_trajectory_current(
    traj: *const SbTrajectory,
    index: usize,
    out_current: *mut i64,
) -> SbStatus {
    guard(|| {
        let t = get(traj, "traj")?;
        let counts = t.0.currents.counts();
        let c = counts
            .get(index)
            .ok_or_else(|| Error::Usage(format!("watched bond index {index} out of {}", counts.len())))?;
        *out(out_current, "out_current")? = *c;
        Ok(())
    })
}

/// Net displacement of the tagged particle.
///
/// # Safety
/// `traj` must be a live handle and `out_disp` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_trajectory_tagged_displacement(traj: *const SbTrajectory, out_disp: *mut i64) -> SbStatus {
    guard(|| {
        let t = get(traj, "traj")?;
        let tagged =
            t.0.tagged
                .ok_or_else(|| Error::Usage("no tagged particle was requested".into()))?;
        *out(out_disp, "out_disp")? = tagged.displacement;
        Ok(())
    })
}

/// Solves the hydrodynamic equation of `regime` on `[0, 1]` with `m` cells.
/// The initial profile interpolates `rho0[0..len]` placed at equally spaced
/// points `j / (len - 1)`.
///
/// # Safety
/// `rho0` must be valid for `len` reads and `out_grid` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sb_pde_solve(
    regime_kind: SbRegime,
    alpha: f64,
    rho0: *const f64,
    len: usize,
    m: usize,
    t_final: f64,
    dt: f64,
    out_grid: *mut *mut SbGrid,
) -> SbStatus {
    guard(|| {
        let values = slice(rho0, len, "rho0")?;
        let slot = out(out_grid, "out_grid")?;
        if len < 2 {
            return Err(Error::Usage("initial profile needs at least 2 points".into()).into());
        }
        let last = (len - 1) as f64;
        let points = values.iter().enumerate().map(|(j, &r)| (j as f64 / last, r)).collect();
        let profile = DensityProfile::table(points)?;
        let bc = BoundaryCondition::for_regime(regime(regime_kind, alpha)?);
        let sol = pde::solve(bc, &profile, m, t_final, dt, SolverOptions::default())?;
        *slot = Box::into_raw(Box::new(SbGrid(sol)));
        Ok(())
    })
}

/// # Safety
/// `grid` must be null or a handle from [`sb_pde_solve`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sb_grid_free(grid: *mut SbGrid) {
    if !grid.is_null() {
        drop(Box::from_raw(grid));
    }
}

/// Number of cells `m` and time steps; the grid has `m + 1` nodes and
/// `steps + 1` time levels.
///
/// # Safety
/// `grid` must be a live handle; the out-pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sb_grid_shape(grid: *const SbGrid, out_m: *mut usize, out_steps: *mut usize) -> SbStatus {
    guard(|| {
        let g = get(grid, "grid")?;
        *out(out_m, "out_m")? = g.0.m();
        *out(out_steps, "out_steps")? = g.0.steps();
        Ok(())
    })
}

/// Copies time level `k` (`m + 1` values) into `buf`.
///
/// # Safety
/// `grid` must be a live handle and `buf` valid for `len` writes.
#[no_mangle]
pub unsafe extern "C" fn sb_grid_row(grid: *const SbGrid, k: usize, buf: *mut f64, len: usize) -> SbStatus {
    guard(|| {
        let g = get(grid, "grid")?;
        if k > g.0.steps() {
            return Err(Error::Usage(format!("time level {k} beyond {}", g.0.steps())).into());
        }
        let row = g.0.row(k);
        if len < row.len() {
            return Err(Error::Usage(format!("buffer holds {len} values, need {}", row.len())).into());
        }
        if buf.is_null() {
            return Err(Fail::Null("buf"));
        }
        ptr::copy_nonoverlapping(row.as_ptr(), buf, row.len());
        Ok(())
    })
}

/// Trapezoid mass of time level `k`.
///
/// # Safety
/// `grid` must be a live handle and `out_mass` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_grid_mass(grid: *const SbGrid, k: usize, out_mass: *mut f64) -> SbStatus {
    guard(|| {
        let g = get(grid, "grid")?;
        if k > g.0.steps() {
            return Err(Error::Usage(format!("time level {k} beyond {}", g.0.steps())).into());
        }
        *out(out_mass, "out_mass")? = g.0.mass(k);
        Ok(())
    })
}

/// `Phi(t, x) = P(N(0, 2t) >= x)`.
///
/// # Safety
/// `out_value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_phi(t: f64, x: f64, out_value: *mut f64) -> SbStatus {
    guard(|| {
        *out(out_value, "out_value")? = closed_forms::phi(t, x)?;
        Ok(())
    })
}

/// `chi(rho) = rho (1 - rho)`.
///
/// # Safety
/// `out_value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_chi(rho: f64, out_value: *mut f64) -> SbStatus {
    guard(|| {
        *out(out_value, "out_value")? = closed_forms::chi(rho)?;
        Ok(())
    })
}

/// Limiting variance of the rescaled current through `u` at time `t`.
///
/// # Safety
/// `out_value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_current_variance(
    regime_kind: SbRegime,
    alpha: f64,
    rho: f64,
    u: f64,
    t: f64,
    out_value: *mut f64,
) -> SbStatus {
    guard(|| {
        let r = regime(regime_kind, alpha)?;
        *out(out_value, "out_value")? = closed_forms::current_variance(r, rho, u, t)?;
        Ok(())
    })
}

/// Limiting variance of the rescaled tagged displacement. `printed_form`
/// selects the alternative normalisation of the critical case.
///
/// # Safety
/// `out_value` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_tagged_variance(
    regime_kind: SbRegime,
    alpha: f64,
    rho: f64,
    u: f64,
    t: f64,
    printed_form: bool,
    out_value: *mut f64,
) -> SbStatus {
    guard(|| {
        let r = regime(regime_kind, alpha)?;
        let form = if printed_form {
            TaggedForm::PrintedCritical
        } else {
            TaggedForm::InLaw
        };
        *out(out_value, "out_value")? = closed_forms::tagged_variance_with(r, rho, u, t, form)?;
        Ok(())
    })
}

/// Max-norm of `nu_rho L` for the exact generator; needs `n <= 12`.
///
/// # Safety
/// `params` must be a live handle and `out_value` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sb_stationarity_residual(params: *const SbParams, rho: f64, out_value: *mut f64) -> SbStatus {
    guard(|| {
        let p = get(params, "params")?;
        let gen = build_generator(&p.0)?;
        *out(out_value, "out_value")? = stationarity_residual(&gen, rho)?;
        Ok(())
    })
}
