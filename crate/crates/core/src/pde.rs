//! Finite-difference solvers for the heat equation on `[0, 1]` with periodic,
//! Robin-type (`∂ρ(0) = ∂ρ(1) = α(ρ(0) - ρ(1))`) or Neumann boundaries, plus
//! the integral functionals used to compare solutions.
//!
//! All solutions live on the nodes `u_j = j/M`, `j = 0..=M`. The periodic
//! solver computes on `j < M` and copies node 0 into node M. Boundary fluxes
//! are imposed through ghost nodes so that the centered first difference at
//! the boundary equals the prescribed flux; the Robin coupling ties node 0 to
//! node M, which makes the system tridiagonal plus corners.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{usage, Error, Result};
use crate::lattice::DensityProfile;
use crate::quadrature::trapezoid;
use crate::sbeta::Regime;
use crate::tridiag::{CyclicTridiagonal, Tridiagonal};

pub const MASS_TOL: f64 = 1e-8;
pub const MAX_PRINCIPLE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BoundaryCondition {
    Periodic,
    Robin { alpha: f64 },
    Neumann,
}

impl BoundaryCondition {
    /// Limiting boundary condition at the slow bond for `regime`.
    pub fn for_regime(regime: Regime) -> Self {
        match regime {
            Regime::Sub => BoundaryCondition::Periodic,
            Regime::Critical { alpha } => BoundaryCondition::Robin { alpha },
            Regime::Super => BoundaryCondition::Neumann,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BoundaryCondition::Periodic => "periodic",
            BoundaryCondition::Robin { .. } => "robin",
            BoundaryCondition::Neumann => "neumann",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    #[default]
    CrankNicolson,
    ExplicitEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    pub scheme: Scheme,
    /// Crank–Nicolson steps at the start replaced by two implicit Euler half
    /// steps each, which damps the grid-scale modes of rough initial data.
    pub startup_steps: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            scheme: Scheme::CrankNicolson,
            startup_steps: 2,
        }
    }
}

/// Space-time field `ρ(t_k, u_j)`, `t_k = k dt`, `u_j = j/M`.
#[derive(Debug, Clone)]
pub struct GridSolution {
    m: usize,
    dt: f64,
    steps: usize,
    bc: BoundaryCondition,
    values: Vec<f64>,
}

impl GridSolution {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn bc(&self) -> BoundaryCondition {
        self.bc
    }

    pub fn final_time(&self) -> f64 {
        self.steps as f64 * self.dt
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn u(&self, j: usize) -> f64 {
        j as f64 / self.m as f64
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let w = self.m + 1;
        &self.values[k * w..(k + 1) * w]
    }

    pub fn value(&self, k: usize, j: usize) -> f64 {
        self.values[k * (self.m + 1) + j]
    }

    /// Trapezoid mass `∫_0^1 ρ(t_k, u) du`.
    pub fn mass(&self, k: usize) -> f64 {
        trapezoid(self.row(k), 1.0 / self.m as f64)
    }

    /// `∫_0^1 H(u) ρ(t_k, u) du` by the trapezoid rule.
    pub fn pairing(&self, k: usize, h: impl Fn(f64) -> f64) -> f64 {
        let vals: Vec<f64> = self.row(k).iter().enumerate().map(|(j, r)| r * h(self.u(j))).collect();
        trapezoid(&vals, 1.0 / self.m as f64)
    }

    /// Index of the stored time equal to `t`, if any.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let k = (t / self.dt).round();
        if k < 0.0 || k as usize > self.steps || (k * self.dt - t).abs() > 1e-9 * t.abs().max(1.0) {
            return usage(format!(
                "time {t} is not on the solution grid (dt = {}, T = {})",
                self.dt,
                self.final_time()
            ));
        }
        Ok(k as usize)
    }

    /// CSV: header `t,u_0,...,u_M`, then one row per `every`-th time level.
    pub fn write_csv<W: Write>(&self, out: W, every: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((0..=self.m).map(|j| self.u(j).to_string()));
        w.write_record(&header)?;
        let every = every.max(1);
        let mut ks: Vec<usize> = (0..=self.steps).step_by(every).collect();
        if *ks.last().unwrap_or(&0) != self.steps {
            ks.push(self.steps);
        }
        for k in ks {
            let mut rec = vec![self.time(k).to_string()];
            rec.extend(self.row(k).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn step_count(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final >= 0.0) || !t_final.is_finite() {
        return usage(format!("final time must be finite and >= 0, got {t_final}"));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return usage(format!("dt must be positive, got {dt}"));
    }
    let steps = (t_final / dt).round();
    if (steps * dt - t_final).abs() > 1e-9 * t_final.max(1.0) {
        return usage(format!("T = {t_final} is not a whole number of steps dt = {dt}"));
    }
    Ok(steps as usize)
}

/// Semi-discrete operator `A` on the unknowns of `bc`.
struct Operator {
    bc: BoundaryCondition,
    inv_h2: f64,
    /// `2 h α`, zero for Neumann.
    robin: f64,
}

impl Operator {
    fn new(bc: BoundaryCondition, m: usize) -> Self {
        let h = 1.0 / m as f64;
        let robin = match bc {
            BoundaryCondition::Robin { alpha } => 2.0 * h * alpha,
            _ => 0.0,
        };
        Self {
            bc,
            inv_h2: (m * m) as f64,
            robin,
        }
    }

    fn unknowns(&self, m: usize) -> usize {
        match self.bc {
            BoundaryCondition::Periodic => m,
            _ => m + 1,
        }
    }

    /// Bands `(sub, diag, sup, top_right, bottom_left)` of `A`.
    fn bands(&self, n: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>, f64, f64) {
        let k = self.inv_h2;
        let mut sub = vec![k; n];
        let mut diag = vec![-2.0 * k; n];
        let mut sup = vec![k; n];
        match self.bc {
            BoundaryCondition::Periodic => (sub, diag, sup, k, k),
            _ => {
                sup[0] = 2.0 * k;
                sub[n - 1] = 2.0 * k;
                diag[0] = -(2.0 + self.robin) * k;
                diag[n - 1] = -(2.0 + self.robin) * k;
                let corner = self.robin * k;
                (sub, diag, sup, corner, corner)
            }
        }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        let n = x.len();
        let (sub, diag, sup, tr, bl) = self.bands(n);
        for i in 0..n {
            let mut s = diag[i] * x[i];
            if i > 0 {
                s += sub[i] * x[i - 1];
            }
            if i + 1 < n {
                s += sup[i] * x[i + 1];
            }
            out[i] = s;
        }
        out[0] += tr * x[n - 1];
        out[n - 1] += bl * x[0];
    }

    /// Largest stable explicit Euler step.
    fn explicit_limit(&self) -> f64 {
        1.0 / ((2.0 + self.robin) * self.inv_h2)
    }
}

enum LinearSolver {
    Plain(Tridiagonal),
    Cyclic(CyclicTridiagonal),
}

impl LinearSolver {
    /// Factorizes `I - theta * dt * A`.
    fn new(op: &Operator, n: usize, theta_dt: f64) -> Result<Self> {
        let (sub, diag, sup, tr, bl) = op.bands(n);
        let sub: Vec<f64> = sub.iter().map(|a| -theta_dt * a).collect();
        let sup: Vec<f64> = sup.iter().map(|a| -theta_dt * a).collect();
        let diag: Vec<f64> = diag.iter().map(|a| 1.0 - theta_dt * a).collect();
        if tr == 0.0 && bl == 0.0 {
            Ok(LinearSolver::Plain(Tridiagonal::new(&sub, &diag, &sup)?))
        } else {
            Ok(LinearSolver::Cyclic(CyclicTridiagonal::new(
                &sub,
                &diag,
                &sup,
                -theta_dt * tr,
                -theta_dt * bl,
            )?))
        }
    }

    fn solve(&self, x: &mut [f64]) {
        match self {
            LinearSolver::Plain(s) => s.solve_in_place(x),
            LinearSolver::Cyclic(s) => s.solve_in_place(x),
        }
    }
}

/// Solves `∂_t ρ = Δρ` with boundary condition `bc` from `rho0` on
/// `[0, t_final]`, storing every time level.
pub fn solve(
    bc: BoundaryCondition,
    rho0: &DensityProfile,
    m: usize,
    t_final: f64,
    dt: f64,
    opts: SolverOptions,
) -> Result<GridSolution> {
    if m < 4 {
        return usage(format!("need at least 4 grid intervals, got {m}"));
    }
    if let BoundaryCondition::Robin { alpha } = bc {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return usage(format!("robin boundary needs alpha > 0, got {alpha}"));
        }
    }
    let steps = step_count(t_final, dt)?;
    let op = Operator::new(bc, m);
    let n = op.unknowns(m);
    let mut x: Vec<f64> = (0..n).map(|j| rho0.eval(j as f64 / m as f64)).collect();
    let width = m + 1;
    let mut values = Vec::with_capacity((steps + 1) * width);
    let push = |values: &mut Vec<f64>, x: &[f64]| {
        values.extend_from_slice(x);
        if n == m {
            values.push(x[0]);
        }
    };
    push(&mut values, &x);

    let mut work = vec![0.0; n];
    match opts.scheme {
        Scheme::ExplicitEuler => {
            if dt > op.explicit_limit() * (1.0 + 1e-12) {
                return Err(Error::Refused(format!(
                    "explicit Euler is unstable for dt = {dt} (limit {:.3e} at M = {m})",
                    op.explicit_limit()
                )));
            }
            for _ in 0..steps {
                op.apply(&x, &mut work);
                for (xi, wi) in x.iter_mut().zip(&work) {
                    *xi += dt * wi;
                }
                push(&mut values, &x);
            }
        }
        Scheme::CrankNicolson => {
            let startup = opts.startup_steps.min(steps);
            let implicit_half = if startup > 0 {
                Some(LinearSolver::new(&op, n, 0.5 * dt)?)
            } else {
                None
            };
            let cn = LinearSolver::new(&op, n, 0.5 * dt)?;
            for k in 0..steps {
                if k < startup {
                    let s = implicit_half.as_ref().expect("factorized");
                    s.solve(&mut x);
                    s.solve(&mut x);
                } else {
                    op.apply(&x, &mut work);
                    for (xi, wi) in x.iter_mut().zip(&work) {
                        *xi += 0.5 * dt * wi;
                    }
                    cn.solve(&mut x);
                }
                push(&mut values, &x);
            }
        }
    }

    let sol = GridSolution {
        m,
        dt,
        steps,
        bc,
        values,
    };
    post_check(&sol)?;
    Ok(sol)
}

fn post_check(sol: &GridSolution) -> Result<()> {
    let first = sol.row(0);
    let lo = first.iter().cloned().fold(f64::INFINITY, f64::min) - MAX_PRINCIPLE_TOL;
    let hi = first.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + MAX_PRINCIPLE_TOL;
    if let Some(v) = sol.values.iter().find(|v| !(lo..=hi).contains(*v)) {
        return Err(Error::Numerical(format!(
            "maximum principle violated: value {v} outside [{lo}, {hi}]"
        )));
    }
    let m0 = sol.mass(0);
    for k in 1..=sol.steps {
        let drift = (sol.mass(k) - m0).abs();
        if drift > MASS_TOL {
            return Err(Error::Numerical(format!("mass drifted by {drift:e} at step {k}")));
        }
    }
    Ok(())
}

pub fn solve_periodic(rho0: &DensityProfile, m: usize, t_final: f64, dt: f64) -> Result<GridSolution> {
    solve(
        BoundaryCondition::Periodic,
        rho0,
        m,
        t_final,
        dt,
        SolverOptions::default(),
    )
}

pub fn solve_robin(rho0: &DensityProfile, alpha: f64, m: usize, t_final: f64, dt: f64) -> Result<GridSolution> {
    if !(alpha > 0.0) {
        return usage(format!("alpha must be positive, got {alpha}"));
    }
    solve(
        BoundaryCondition::Robin { alpha },
        rho0,
        m,
        t_final,
        dt,
        SolverOptions::default(),
    )
}

pub fn solve_neumann(rho0: &DensityProfile, m: usize, t_final: f64, dt: f64) -> Result<GridSolution> {
    solve(
        BoundaryCondition::Neumann,
        rho0,
        m,
        t_final,
        dt,
        SolverOptions::default(),
    )
}

type Field = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Test function `H(t, u)` with its time derivative and first and second
/// space derivatives.
#[derive(Clone)]
pub struct TestFunctionCT {
    pub h: Field,
    pub dt_h: Field,
    pub du_h: Field,
    pub duu_h: Field,
}

impl TestFunctionCT {
    pub fn new(
        h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        dt_h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        du_h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        duu_h: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            h: Arc::new(h),
            dt_h: Arc::new(dt_h),
            du_h: Arc::new(du_h),
            duu_h: Arc::new(duu_h),
        }
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _| c, |_, _| 0.0, |_, _| 0.0, |_, _| 0.0)
    }

    /// Largest mismatch between the supplied derivatives and centered
    /// differences with step `step`, over a grid of `[0, t_max] x [0, 1]`.
    pub fn derivative_mismatch(&self, t_max: f64, step: f64) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..=8 {
            let t = step + (t_max - 2.0 * step).max(0.0) * i as f64 / 8.0;
            for j in 1..16 {
                let u = j as f64 / 16.0;
                let h = &self.h;
                let ft = (h(t + step, u) - h(t - step, u)) / (2.0 * step);
                let fu = (h(t, u + step) - h(t, u - step)) / (2.0 * step);
                let fuu = (h(t, u + step) - 2.0 * h(t, u) + h(t, u - step)) / (step * step);
                worst = worst
                    .max((ft - (self.dt_h)(t, u)).abs())
                    .max((fu - (self.du_h)(t, u)).abs())
                    .max((fuu - (self.duu_h)(t, u)).abs());
            }
        }
        worst
    }
}

/// Absolute residual of the weak formulation at time `t`:
///
/// `∫ρ_t H_t - ∫ρ_0 H_0 - ∫_0^t ∫ ρ (∂_s H + ΔH)`
/// `  - ∫_0^t (ρ_s(0) ∂H_s(0) - ρ_s(1) ∂H_s(1))` (Robin and Neumann)
/// `  + ∫_0^t α (ρ_s(0) - ρ_s(1)) (H_s(0) - H_s(1))` (Robin).
pub fn weak_residual(sol: &GridSolution, h: &TestFunctionCT, t: f64) -> Result<f64> {
    let k_end = sol.step_of(t)?;
    let m = sol.m;
    let du = 1.0 / m as f64;
    let space = |k: usize, f: &dyn Fn(f64, f64) -> f64| -> f64 {
        let s = sol.time(k);
        let vals: Vec<f64> = (0..=m).map(|j| sol.value(k, j) * f(s, sol.u(j))).collect();
        trapezoid(&vals, du)
    };
    let pair = |s: f64, u: f64| (h.h)(s, u);
    let gen = |s: f64, u: f64| (h.dt_h)(s, u) + (h.duu_h)(s, u);
    let end = space(k_end, &pair);
    let start = space(0, &pair);
    let bulk_t: Vec<f64> = (0..=k_end).map(|k| space(k, &gen)).collect();
    let bulk = trapezoid(&bulk_t, sol.dt);

    let mut residual = end - start - bulk;
    if !matches!(sol.bc, BoundaryCondition::Periodic) {
        let flux: Vec<f64> = (0..=k_end)
            .map(|k| {
                let s = sol.time(k);
                sol.value(k, 0) * (h.du_h)(s, 0.0) - sol.value(k, m) * (h.du_h)(s, 1.0)
            })
            .collect();
        residual -= trapezoid(&flux, sol.dt);
    }
    if let BoundaryCondition::Robin { alpha } = sol.bc {
        let exchange: Vec<f64> = (0..=k_end)
            .map(|k| {
                let s = sol.time(k);
                alpha * (sol.value(k, 0) - sol.value(k, m)) * ((h.h)(s, 0.0) - (h.h)(s, 1.0))
            })
            .collect();
        residual += trapezoid(&exchange, sol.dt);
    }
    Ok(residual.abs())
}

fn check_same_grid(a: &GridSolution, b: &GridSolution) -> Result<()> {
    if a.m != b.m || a.steps != b.steps || (a.dt - b.dt).abs() > 1e-15 * a.dt {
        return usage(format!(
            "grid mismatch: (M={}, dt={}, steps={}) vs (M={}, dt={}, steps={})",
            a.m, a.dt, a.steps, b.m, b.dt, b.steps
        ));
    }
    Ok(())
}

/// `sqrt(∫_0^T ∫_0^1 (a - b)^2 du dt)` by the trapezoid rule in both variables.
pub fn l2_spacetime_distance(a: &GridSolution, b: &GridSolution) -> Result<f64> {
    check_same_grid(a, b)?;
    let du = 1.0 / a.m as f64;
    let per_time: Vec<f64> = (0..=a.steps)
        .map(|k| {
            let sq: Vec<f64> = a.row(k).iter().zip(b.row(k)).map(|(x, y)| (x - y).powi(2)).collect();
            trapezoid(&sq, du)
        })
        .collect();
    Ok(trapezoid(&per_time, a.dt).sqrt())
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseRow {
    pub alpha: f64,
    pub dist_neumann: f64,
    pub dist_periodic: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PhaseTransition {
    pub rows: Vec<PhaseRow>,
    /// Distance between the periodic and Neumann solutions themselves.
    pub periodic_to_neumann: f64,
}

impl PhaseTransition {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "dist_neumann", "dist_periodic"])?;
        for r in &self.rows {
            w.write_record([
                r.alpha.to_string(),
                r.dist_neumann.to_string(),
                r.dist_periodic.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Robin solutions for each `alpha`, measured against the Neumann and
/// periodic solutions in the space-time L² norm.
pub fn phase_transition_curve(
    rho0: &DensityProfile,
    alphas: &[f64],
    m: usize,
    t_final: f64,
    dt: f64,
) -> Result<PhaseTransition> {
    if let Some(a) = alphas.iter().find(|a| !(**a > 0.0)) {
        return usage(format!("alphas must be positive, got {a}"));
    }
    let neumann = solve_neumann(rho0, m, t_final, dt)?;
    let periodic = solve_periodic(rho0, m, t_final, dt)?;
    let rows = alphas
        .par_iter()
        .map(|&alpha| {
            let robin = solve_robin(rho0, alpha, m, t_final, dt)?;
            Ok(PhaseRow {
                alpha,
                dist_neumann: l2_spacetime_distance(&robin, &neumann)?,
                dist_periodic: l2_spacetime_distance(&robin, &periodic)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PhaseTransition {
        rows,
        periodic_to_neumann: l2_spacetime_distance(&periodic, &neumann)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn cos_profile(k: f64) -> DensityProfile {
        DensityProfile::callable(move |u| 0.5 + 0.5 * (k * PI * u).cos()).unwrap()
    }

    fn max_error(sol: &GridSolution, k: usize, exact: impl Fn(f64, f64) -> f64) -> f64 {
        let t = sol.time(k);
        (0..=sol.m())
            .map(|j| (sol.value(k, j) - exact(t, sol.u(j))).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn constants_are_stationary() {
        let c = DensityProfile::constant(0.37).unwrap();
        for bc in [
            BoundaryCondition::Periodic,
            BoundaryCondition::Neumann,
            BoundaryCondition::Robin { alpha: 3.0 },
        ] {
            let sol = solve(bc, &c, 64, 0.1, 0.1 / 64.0, SolverOptions::default()).unwrap();
            for k in 0..=sol.steps() {
                for &v in sol.row(k) {
                    assert!((v - 0.37).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn periodic_eigenfunction() {
        let sol = solve_periodic(&cos_profile(2.0), 128, 0.1, 0.1 / 64.0).unwrap();
        let err = max_error(&sol, sol.steps(), |t, u| {
            0.5 + 0.5 * (-4.0 * PI * PI * t).exp() * (2.0 * PI * u).cos()
        });
        assert!(err < 20.0 / (128.0 * 128.0), "err {err}");
    }

    #[test]
    fn neumann_eigenfunction_second_order() {
        let mut errs = Vec::new();
        for m in [64, 128, 256] {
            let sol = solve_neumann(&cos_profile(1.0), m, 0.1, 0.1 / (m / 2) as f64).unwrap();
            errs.push(max_error(&sol, sol.steps(), |t, u| {
                0.5 + 0.5 * (-PI * PI * t).exp() * (PI * u).cos()
            }));
        }
        assert!(errs[0] / errs[1] > 3.5 && errs[1] / errs[2] > 3.5, "{errs:?}");
    }

    #[test]
    fn explicit_matches_crank_nicolson() {
        let p = cos_profile(2.0);
        let m = 32;
        let dt = 1.0 / (4.0 * (m * m) as f64);
        let t = dt * 400.0;
        let opts = SolverOptions {
            scheme: Scheme::ExplicitEuler,
            startup_steps: 0,
        };
        for bc in [BoundaryCondition::Periodic, BoundaryCondition::Robin { alpha: 2.0 }] {
            let ee = solve(bc, &p, m, t, dt, opts).unwrap();
            let cn = solve(bc, &p, m, t, dt, SolverOptions::default()).unwrap();
            let err = max_error(&ee, ee.steps(), |_, u| {
                cn.value(cn.steps(), (u * m as f64).round() as usize)
            });
            // Euler is first order in time: about λ² dt t e^{-λt} / 4 here.
            assert!(err < 1e-3, "{bc:?}: {err}");
        }
        let too_big = solve(BoundaryCondition::Periodic, &p, m, 0.1, 0.01, opts);
        assert!(matches!(too_big, Err(Error::Refused(_))));
    }

    #[test]
    fn step_data_mass_and_bounds() {
        let step = DensityProfile::step(1.0, 0.0).unwrap();
        for bc in [
            BoundaryCondition::Periodic,
            BoundaryCondition::Neumann,
            BoundaryCondition::Robin { alpha: 1e3 },
            BoundaryCondition::Robin { alpha: 1e-3 },
        ] {
            let sol = solve(bc, &step, 512, 0.5, 0.5 / 4096.0, SolverOptions::default()).unwrap();
            assert!((sol.mass(sol.steps()) - sol.mass(0)).abs() < MASS_TOL);
        }
    }

    #[test]
    fn neumann_step_relaxes_monotonically() {
        let step = DensityProfile::step(1.0, 0.0).unwrap();
        let sol = solve_neumann(&step, 256, 1.0, 1.0 / 512.0).unwrap();
        let dist = |k: usize| {
            let sq: Vec<f64> = sol.row(k).iter().map(|v| (v - 0.5).powi(2)).collect();
            trapezoid(&sq, 1.0 / 256.0).sqrt()
        };
        let mut prev = dist(0);
        for k in (8..=sol.steps()).step_by(8) {
            let d = dist(k);
            assert!(d < prev);
            prev = d;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn robin_limits() {
        let step = DensityProfile::step(1.0, 0.0).unwrap();
        let (m, t, dt) = (256, 0.1, 0.1 / 512.0);
        let per = solve_periodic(&step, m, t, dt).unwrap();
        let neu = solve_neumann(&step, m, t, dt).unwrap();
        let big = solve_robin(&step, 1e3, m, t, dt).unwrap();
        let small = solve_robin(&step, 1e-3, m, t, dt).unwrap();
        let l2_final = |a: &GridSolution, b: &GridSolution| {
            let sq: Vec<f64> = a
                .row(a.steps())
                .iter()
                .zip(b.row(b.steps()))
                .map(|(x, y)| (x - y).powi(2))
                .collect();
            trapezoid(&sq, 1.0 / m as f64).sqrt()
        };
        assert!(l2_final(&big, &per) < 2e-2);
        assert!(l2_final(&small, &neu) < 2e-2);
        assert!(solve_robin(&step, 0.0, m, t, dt).is_err());
    }

    #[test]
    fn distance_examples() {
        let zero = solve_neumann(&DensityProfile::constant(0.0).unwrap(), 16, 1.0, 1.0 / 16.0).unwrap();
        let one = solve_neumann(&DensityProfile::constant(1.0).unwrap(), 16, 1.0, 1.0 / 16.0).unwrap();
        assert!((l2_spacetime_distance(&zero, &one).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(l2_spacetime_distance(&one, &one).unwrap(), 0.0);
        let other = solve_neumann(&DensityProfile::constant(1.0).unwrap(), 32, 1.0, 1.0 / 16.0).unwrap();
        assert!(l2_spacetime_distance(&one, &other).is_err());
    }

    #[test]
    fn weak_residual_constant_test_function() {
        let step = DensityProfile::step(1.0, 0.0).unwrap();
        let sol = solve_periodic(&step, 128, 0.2, 0.2 / 128.0).unwrap();
        let r = weak_residual(&sol, &TestFunctionCT::constant(1.0), 0.2).unwrap();
        assert!(r <= 1e-8);
        assert!(weak_residual(&sol, &TestFunctionCT::constant(1.0), 0.2005).is_err());
    }

    fn linear_h() -> TestFunctionCT {
        TestFunctionCT::new(|_, u| u, |_, _| 0.0, |_, _| 1.0, |_, _| 0.0)
    }

    fn decaying_h() -> TestFunctionCT {
        // H(t,u) = e^{-t} cos(2πu) (periodic) for the periodic weak form.
        TestFunctionCT::new(
            |t, u| (-t).exp() * (2.0 * PI * u).cos(),
            |t, u| -(-t).exp() * (2.0 * PI * u).cos(),
            |t, u| -(-t).exp() * 2.0 * PI * (2.0 * PI * u).sin(),
            |t, u| -(-t).exp() * 4.0 * PI * PI * (2.0 * PI * u).cos(),
        )
    }

    #[test]
    fn test_function_derivatives_are_consistent() {
        assert!(linear_h().derivative_mismatch(0.5, 1e-4) < 1e-6);
        assert!(decaying_h().derivative_mismatch(0.5, 1e-4) < 1e-5);
    }

    #[test]
    fn weak_residual_converges() {
        let cases: Vec<(BoundaryCondition, DensityProfile, TestFunctionCT)> = vec![
            (BoundaryCondition::Periodic, cos_profile(2.0), decaying_h()),
            (BoundaryCondition::Neumann, cos_profile(1.0), linear_h()),
            (BoundaryCondition::Robin { alpha: 1.5 }, cos_profile(1.0), linear_h()),
            (BoundaryCondition::Robin { alpha: 1.5 }, cos_profile(1.0), decaying_h()),
        ];
        for (bc, p, h) in cases {
            let res: Vec<f64> = [32usize, 64, 128]
                .iter()
                .map(|&m| {
                    let sol = solve(bc, &p, m, 0.1, 0.1 / (m / 2) as f64, SolverOptions::default()).unwrap();
                    weak_residual(&sol, &h, 0.1).unwrap()
                })
                .collect();
            assert!(res[2] < res[1] && res[1] < res[0] || res[2] < 1e-12, "{bc:?}: {res:?}");
            // cos(πu) violates the Robin condition at t = 0, which costs half an
            // order through the initial boundary layer.
            assert!(
                res[2] < 1e-3 && (res[1] / res[2] > 2.5 || res[2] < 1e-12),
                "{bc:?}: {res:?}"
            );
        }
    }

    #[test]
    fn csv_layout() {
        let sol = solve_neumann(&DensityProfile::constant(0.5).unwrap(), 4, 0.1, 0.05).unwrap();
        let mut buf = Vec::new();
        sol.write_csv(&mut buf, 1).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "t,0,0.25,0.5,0.75,1");
        assert_eq!(lines.len(), 4);
        assert!(lines[3].starts_with("0.1,0.5"));
    }
}
