//! Ensembles of independent trajectories and the experiments that confront
//! them with the limit theorems.
//!
//! Trajectory `i` of an ensemble uses seed `base + i`. Trajectories run in
//! parallel, results are collected in seed order and every aggregate is a
//! sequential fold over that order, so outputs do not depend on the number
//! of worker threads.

use std::f64::consts::PI;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_forms::{chi, current_variance, gradient_norm_2beta_sq, l2_inner, tagged_variance};
use crate::engine::{order_identity_violation, ObserverSet, Simulator};
use crate::error::{usage, Error, Result};
use crate::lattice::{
    sample_bernoulli_product, sample_conditioned, sample_stationary, Configuration, DensityProfile, SiteMap,
    SlowBondParams,
};
use crate::pde::{self, BoundaryCondition, SolverOptions};
use crate::rng::stream_seed;
use crate::sbeta::{delta_beta, Regime, SBetaFunction};

/// Gate on z-scores, as a number of standard errors.
pub const Z_GATE: f64 = 3.0;

/// Stream used for initial configurations; dynamics use the seed itself.
const INIT_STREAM: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRange {
    pub base: u64,
    pub count: usize,
}

impl SeedRange {
    pub fn new(base: u64, count: usize) -> Result<Self> {
        if count == 0 {
            return usage("empty seed range");
        }
        if base.checked_add(count as u64 - 1).is_none() {
            return usage(format!("seeds {base} + 0..{count} overflow u64"));
        }
        Ok(Self { base, count })
    }

    pub fn seed(&self, i: usize) -> u64 {
        self.base + i as u64
    }

    pub fn overlaps(&self, other: &SeedRange) -> bool {
        let end = |r: &SeedRange| r.base as u128 + r.count as u128;
        (self.base as u128) < end(other) && (other.base as u128) < end(self)
    }
}

/// Hands out disjoint seed ranges for the ensembles of one experiment.
#[derive(Debug, Clone)]
pub struct SeedPlan {
    next: u64,
    issued: Vec<SeedRange>,
}

impl SeedPlan {
    pub fn new(base_seed: u64) -> Self {
        Self {
            next: base_seed,
            issued: Vec::new(),
        }
    }

    pub fn take(&mut self, count: usize) -> Result<SeedRange> {
        let range = SeedRange::new(self.next, count)?;
        self.next = range
            .base
            .checked_add(count as u64)
            .ok_or_else(|| Error::Usage("seed plan exhausted the u64 range".into()))?;
        self.issued.push(range);
        Ok(range)
    }

    pub fn issued(&self) -> &[SeedRange] {
        &self.issued
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleOptions {
    pub m: usize,
    pub base_seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl EnsembleOptions {
    pub fn new(m: usize, base_seed: u64) -> Self {
        Self {
            m,
            base_seed,
            workers: None,
        }
    }
}

/// Observables of one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub values: Vec<f64>,
    pub events: u64,
}

/// Per-trajectory observables of an ensemble, in seed order.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub names: Vec<String>,
    pub samples: Vec<Vec<f64>>,
    pub seeds: SeedRange,
    pub events: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleStats {
    pub names: Vec<String>,
    pub m: usize,
    pub mean: Vec<f64>,
    pub sample_variance: Vec<f64>,
    pub std_error: Vec<f64>,
    /// Standard error of the sample variance, from the fourth central moment.
    pub variance_std_error: Vec<f64>,
    pub seeds: SeedRange,
    pub events: u64,
}

/// Runs `trajectory(seed)` for the seeds of `seeds` on `workers` threads.
pub fn run_seeds<F>(names: &[String], seeds: SeedRange, workers: Option<usize>, trajectory: F) -> Result<Ensemble>
where
    F: Fn(u64) -> Result<Sample> + Sync,
{
    if seeds.count < 2 {
        return usage(format!("an ensemble needs m >= 2 trajectories, got {}", seeds.count));
    }
    let run = || -> Vec<Result<Sample>> {
        (0..seeds.count)
            .into_par_iter()
            .map(|i| trajectory(seeds.seed(i)))
            .collect()
    };
    let results = match workers {
        Some(w) => {
            if w == 0 {
                return usage("worker count must be positive");
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(w)
                .build()
                .map_err(|e| Error::Usage(format!("cannot start {w} workers: {e}")))?
                .install(run)
        }
        None => run(),
    };
    let mut samples = Vec::with_capacity(seeds.count);
    let mut events = 0u64;
    for (i, r) in results.into_iter().enumerate() {
        let s = r?;
        if s.values.len() != names.len() {
            return Err(Error::Bookkeeping(format!(
                "trajectory {i} returned {} observables, expected {}",
                s.values.len(),
                names.len()
            )));
        }
        if let Some(k) = s.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "observable {} is not finite in trajectory with seed {}; seeds {}..{} completed",
                names[k],
                seeds.seed(i),
                seeds.base,
                seeds.seed(i)
            )));
        }
        events = events
            .checked_add(s.events)
            .ok_or_else(|| Error::Numerical("ensemble event count overflow".into()))?;
        samples.push(s.values);
    }
    Ok(Ensemble {
        names: names.to_vec(),
        samples,
        seeds,
        events,
    })
}

/// `m` trajectories with seeds `base_seed + i`.
pub fn run_ensemble<F>(names: &[String], opts: &EnsembleOptions, trajectory: F) -> Result<Ensemble>
where
    F: Fn(u64) -> Result<Sample> + Sync,
{
    let seeds = SeedRange::new(opts.base_seed, opts.m)?;
    run_seeds(names, seeds, opts.workers, trajectory)
}

impl Ensemble {
    pub fn m(&self) -> usize {
        self.samples.len()
    }

    pub fn column(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().map(move |s| s[k])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.column(k).sum::<f64>() / self.m() as f64
    }

    /// Sample covariance of observables `i` and `j`, with the standard error
    /// of that estimate.
    pub fn covariance(&self, i: usize, j: usize) -> (f64, f64) {
        let m = self.m() as f64;
        let (mi, mj) = (self.mean(i), self.mean(j));
        let prods: Vec<f64> = self.samples.iter().map(|s| (s[i] - mi) * (s[j] - mj)).collect();
        let cov = prods.iter().sum::<f64>() / (m - 1.0);
        let mp = prods.iter().sum::<f64>() / m;
        let var_p = prods.iter().map(|p| (p - mp).powi(2)).sum::<f64>() / (m - 1.0);
        (cov, (var_p / m).sqrt())
    }

    pub fn stats(&self) -> EnsembleStats {
        let m = self.m() as f64;
        let k = self.names.len();
        let mut mean = Vec::with_capacity(k);
        let mut var = Vec::with_capacity(k);
        let mut se = Vec::with_capacity(k);
        let mut var_se = Vec::with_capacity(k);
        for c in 0..k {
            let mu = self.mean(c);
            let (mut s2, mut s4) = (0.0, 0.0);
            for x in self.column(c) {
                let d = (x - mu) * (x - mu);
                s2 += d;
                s4 += d * d;
            }
            let v = s2 / (m - 1.0);
            let m2 = s2 / m;
            let m4 = s4 / m;
            let vv = ((m4 - (m - 3.0) / (m - 1.0) * m2 * m2) / m).max(0.0);
            mean.push(mu);
            var.push(v);
            se.push((v / m).sqrt());
            var_se.push(vv.sqrt());
        }
        EnsembleStats {
            names: self.names.clone(),
            m: self.m(),
            mean,
            sample_variance: var,
            std_error: se,
            variance_std_error: var_se,
            seeds: self.seeds,
            events: self.events,
        }
    }
}

/// `(estimate - target) / std_error`; zero when both the error and the
/// discrepancy vanish, infinite when only the error does.
pub fn z_score(estimate: f64, target: f64, std_error: f64) -> f64 {
    let d = estimate - target;
    if std_error > 0.0 {
        d / std_error
    } else if d == 0.0 {
        0.0
    } else {
        f64::INFINITY.copysign(d)
    }
}

pub fn relative_error(estimate: f64, target: f64) -> f64 {
    if target == 0.0 {
        if estimate == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        ((estimate - target) / target).abs()
    }
}

/// Named real function on `[0, 1]` (or on the line).
#[derive(Clone)]
pub struct NamedFn {
    pub name: String,
    pub f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl NamedFn {
    pub fn new(name: impl Into<String>, f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self {
            name: name.into(),
            f: Arc::new(f),
        }
    }
}

impl std::fmt::Debug for NamedFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "NamedFn({})", self.name)
    }
}

/// `1`, `cos(2πu)` and a smooth bump centered at `1/2`.
pub fn lln_test_functions() -> Vec<NamedFn> {
    vec![
        NamedFn::new("one", |_| 1.0),
        NamedFn::new("cos2pi", |u| (2.0 * PI * u).cos()),
        NamedFn::new("bump", |u| crate::sbeta::bump_jet(0.5, 0.25, u).value),
    ]
}

fn write_rows<W: Write, R: Serialize>(out: W, rows: &[R]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlnSpec {
    pub alpha: f64,
    pub beta: crate::lattice::Beta,
    pub t: f64,
    pub n_list: Vec<usize>,
    pub grid_m: usize,
    pub grid_steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct LlnRow {
    pub n: usize,
    pub test_function: String,
    pub mean_error: f64,
    pub std_error: f64,
    pub max_error: f64,
    pub limit_pairing: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LlnReport {
    pub regime: String,
    pub rows: Vec<LlnRow>,
    pub seeds: Vec<SeedRange>,
    pub events: u64,
}

impl LlnReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    /// Mean error for `(n, test_function)`.
    pub fn error(&self, n: usize, test: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.n == n && r.test_function == test)
            .map(|r| r.mean_error)
    }
}

/// Pairing errors `|⟨π^n_t, H⟩ - ∫ H ρ(t)|` on the unit torus against the
/// PDE whose boundary condition matches the regime of `(alpha, beta)`.
pub fn lln_experiment(
    spec: &LlnSpec,
    profile: &DensityProfile,
    tests: &[NamedFn],
    opts: &EnsembleOptions,
) -> Result<LlnReport> {
    if spec.n_list.is_empty() || tests.is_empty() {
        return usage("lln experiment needs at least one n and one test function");
    }
    if spec.grid_steps == 0 {
        return usage("grid_steps must be positive");
    }
    let probe = SlowBondParams::new(spec.n_list[0], spec.alpha, spec.beta)?;
    let regime = Regime::of(&probe);
    let limit = if spec.t > 0.0 {
        Some(pde::solve(
            BoundaryCondition::for_regime(regime),
            profile,
            spec.grid_m,
            spec.t,
            spec.t / spec.grid_steps as f64,
            SolverOptions::default(),
        )?)
    } else {
        None
    };
    let limit_pairings: Vec<f64> = tests
        .iter()
        .map(|h| match &limit {
            Some(sol) => sol.pairing(sol.steps(), |u| (h.f)(u)),
            None => crate::quadrature::integrate(|u| (h.f)(u) * profile.eval(u), 0.0, 1.0, 1e-12, 1e-12),
        })
        .collect();
    let names: Vec<String> = tests.iter().map(|h| h.name.clone()).collect();
    let mut plan = SeedPlan::new(opts.base_seed);
    let mut rows = Vec::new();
    let mut events = 0u64;
    for &n in &spec.n_list {
        let params = SlowBondParams::new(n, spec.alpha, spec.beta)?;
        let weights: Vec<Vec<f64>> = tests
            .iter()
            .map(|h| (0..n).map(|x| (h.f)(x as f64 / n as f64) / n as f64).collect())
            .collect();
        let seeds = plan.take(opts.m)?;
        let ens = run_seeds(&names, seeds, opts.workers, |seed| {
            let init = sample_bernoulli_product(profile, n, stream_seed(seed, INIT_STREAM))?;
            let mut sim = Simulator::new(params, init, seed, &ObserverSet::default())?;
            sim.advance_to(spec.t)?;
            let occ = sim.config().occupancy();
            let values = weights
                .iter()
                .zip(&limit_pairings)
                .map(|(w, lim)| {
                    let pairing: f64 = w.iter().zip(occ).map(|(a, &e)| a * e as f64).sum();
                    (pairing - lim).abs()
                })
                .collect();
            Ok(Sample {
                values,
                events: sim.events(),
            })
        })?;
        events += ens.events;
        let st = ens.stats();
        for (k, h) in tests.iter().enumerate() {
            rows.push(LlnRow {
                n,
                test_function: h.name.clone(),
                mean_error: st.mean[k],
                std_error: st.std_error[k],
                max_error: ens.column(k).fold(0.0, f64::max),
                limit_pairing: limit_pairings[k],
            });
        }
    }
    Ok(LlnReport {
        regime: regime.name().to_string(),
        rows,
        seeds: plan.issued().to_vec(),
        events,
    })
}

/// Torus size standing in for the line: `2 (u_max + c sqrt(2 t))` macroscopic
/// units, so that the diffusive range `c sqrt(2t)` around every observed point
/// stays clear of the far side.
pub fn guarded_sites(n: usize, u_max: f64, t_max: f64, guard: f64) -> Result<usize> {
    if !(guard > 0.0) || !(t_max >= 0.0) || !u_max.is_finite() {
        return usage("torus guard needs guard > 0, t >= 0 and finite u");
    }
    let width = 2.0 * (u_max.abs() + guard * (2.0 * t_max).sqrt());
    Ok(((width * n as f64).ceil() as usize).max(2 * n))
}

/// Torus covering `[-window, window)` in centered coordinates.
pub fn window_sites(n: usize, window: f64) -> Result<usize> {
    if !(window > 0.0) || !window.is_finite() {
        return usage(format!("window must be positive, got {window}"));
    }
    Ok(2 * (window * n as f64).ceil() as usize)
}

/// `Y^n(H) = n^{-1/2} Σ_x H(x/n)(η(x) - ρ)` in centered coordinates, as a
/// weight vector per site.
pub fn field_weights(map: &SiteMap, h: impl Fn(f64) -> f64) -> Vec<f64> {
    let scale = 1.0 / (map.n() as f64).sqrt();
    (0..map.sites()).map(|x| h(map.centered_point(x)) * scale).collect()
}

pub fn field_value(weights: &[f64], config: &Configuration, rho: f64) -> f64 {
    weights
        .iter()
        .zip(config.occupancy())
        .map(|(w, &e)| w * (e as f64 - rho))
        .sum()
}

/// One comparison of an empirical moment with its theoretical value.
#[derive(Debug, Clone, Serialize)]
pub struct MomentRow {
    pub observable: String,
    pub u: Option<f64>,
    pub t: f64,
    pub mean: f64,
    pub mean_se: f64,
    pub z_mean: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub theory: f64,
    pub z_variance: f64,
    pub rel_error: f64,
    pub rel_tol: Option<f64>,
    /// Whether `z_mean` counts towards `pass`.
    pub mean_gated: bool,
    pub pass: bool,
}

impl MomentRow {
    fn new(
        observable: String,
        u: Option<f64>,
        t: f64,
        st: &EnsembleStats,
        k: usize,
        theory: f64,
        rel_tol: Option<f64>,
    ) -> Self {
        Self::with_mean_gate(observable, u, t, st, k, theory, rel_tol, true)
    }

    #[allow(clippy::too_many_arguments)]
    fn with_mean_gate(
        observable: String,
        u: Option<f64>,
        t: f64,
        st: &EnsembleStats,
        k: usize,
        theory: f64,
        rel_tol: Option<f64>,
        mean_gated: bool,
    ) -> Self {
        let z_mean = z_score(st.mean[k], 0.0, st.std_error[k]);
        let z_variance = z_score(st.sample_variance[k], theory, st.variance_std_error[k]);
        let rel_error = relative_error(st.sample_variance[k], theory);
        let pass = (!mean_gated || z_mean.abs() <= Z_GATE)
            && z_variance.abs() <= Z_GATE
            && rel_tol.is_none_or(|tol| rel_error <= tol);
        Self {
            observable,
            u,
            t,
            mean: st.mean[k],
            mean_se: st.std_error[k],
            z_mean,
            variance: st.sample_variance[k],
            variance_se: st.variance_std_error[k],
            theory,
            z_variance,
            rel_error,
            rel_tol,
            mean_gated,
            pass,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceRow {
    pub t: f64,
    pub g: String,
    pub h: String,
    pub covariance: f64,
    pub std_error: f64,
    pub theory: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FieldSpec {
    pub params: SlowBondParams,
    pub rho: f64,
    pub times: Vec<f64>,
    /// Half-width of the torus in macroscopic units.
    pub window: f64,
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FieldReport {
    pub sites: usize,
    pub rows: Vec<MomentRow>,
    pub covariances: Vec<CovarianceRow>,
    pub seeds: SeedRange,
    pub events: u64,
}

impl FieldReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    pub fn write_covariance_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.covariances)
    }

    pub fn pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass) && self.covariances.iter().all(|r| r.pass)
    }
}

/// Moments of `Y^n_t(H)` from the stationary start, against the stationary
/// variance `χ(ρ)‖H‖₂²`, plus pairwise covariances against `χ(ρ)∫GH`.
pub fn field_experiment(spec: &FieldSpec, tests: &[SBetaFunction], opts: &EnsembleOptions) -> Result<FieldReport> {
    if tests.is_empty() || spec.times.is_empty() {
        return usage("field experiment needs test functions and times");
    }
    crate::engine::check_snapshot_times(&spec.times, f64::INFINITY)?;
    let c = chi(spec.rho)?;
    let n = spec.params.n();
    let map = SiteMap::new(n, window_sites(n, spec.window)?)?;
    let weights: Vec<Vec<f64>> = tests.iter().map(|h| field_weights(&map, |u| h.eval(u))).collect();
    let mut names = Vec::new();
    for &t in &spec.times {
        for h in tests {
            names.push(format!("Y[t={t}]({})", h.name()));
        }
    }
    let params = spec.params;
    let ens = run_ensemble(&names, opts, |seed| {
        let init = sample_stationary(spec.rho, map.sites(), stream_seed(seed, INIT_STREAM))?;
        let mut sim = Simulator::new(params, init, seed, &ObserverSet::default())?;
        let mut values = Vec::with_capacity(names.len());
        for &t in &spec.times {
            sim.advance_to(t)?;
            values.extend(weights.iter().map(|w| field_value(w, sim.config(), spec.rho)));
        }
        Ok(Sample {
            values,
            events: sim.events(),
        })
    })?;
    let st = ens.stats();
    let mut rows = Vec::new();
    let mut covariances = Vec::new();
    for (ti, &t) in spec.times.iter().enumerate() {
        let base = ti * tests.len();
        for (hi, h) in tests.iter().enumerate() {
            let theory = c * l2_inner(h, h);
            rows.push(MomentRow::new(
                h.name().to_string(),
                None,
                t,
                &st,
                base + hi,
                theory,
                spec.rel_tol,
            ));
        }
        for gi in 0..tests.len() {
            for hi in gi + 1..tests.len() {
                let (cov, se) = ens.covariance(base + gi, base + hi);
                let theory = c * l2_inner(&tests[gi], &tests[hi]);
                let z = z_score(cov, theory, se);
                covariances.push(CovarianceRow {
                    t,
                    g: tests[gi].name().to_string(),
                    h: tests[hi].name().to_string(),
                    covariance: cov,
                    std_error: se,
                    theory,
                    z,
                    pass: z.abs() <= Z_GATE,
                });
            }
        }
    }
    Ok(FieldReport {
        sites: map.sites(),
        rows,
        covariances,
        seeds: ens.seeds,
        events: ens.events,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MartingaleSpec {
    pub params: SlowBondParams,
    pub rho: f64,
    pub t: f64,
    pub snapshots_per_unit: usize,
    pub window: f64,
    pub rel_tol: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MartingaleReport {
    pub regime: String,
    pub sites: usize,
    pub row: MomentRow,
    pub seeds: SeedRange,
    pub events: u64,
}

impl MartingaleReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, std::slice::from_ref(&self.row))
    }
}

/// Snapshot grid `k / per_unit` on `[0, t]`, closed at `t`.
fn time_grid(t: f64, per_unit: usize) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..)
        .map(|k| k as f64 / per_unit as f64)
        .take_while(|&s| s < t - 1e-12)
        .collect();
    grid.push(t);
    grid
}

/// `M_t(H) = Y_t(H) - Y_0(H) - ∫_0^t Y_s(Δ_β H) ds`, with the time integral
/// by the trapezoid rule over the snapshot grid; its variance is compared
/// with `2χ(ρ) t ‖∇_β H‖²_{2,β}`.
pub fn martingale_check(spec: &MartingaleSpec, h: &SBetaFunction, opts: &EnsembleOptions) -> Result<MartingaleReport> {
    if !(spec.t > 0.0) || spec.snapshots_per_unit == 0 {
        return usage("martingale check needs t > 0 and a positive snapshot rate");
    }
    let regime = Regime::of(&spec.params);
    h.check_regime(regime)?;
    let c = chi(spec.rho)?;
    let n = spec.params.n();
    let map = SiteMap::new(n, window_sites(n, spec.window.max(h.window()))?)?;
    let w_h = field_weights(&map, |u| h.eval(u));
    let lap = delta_beta(h);
    let w_lap = field_weights(&map, lap);
    let grid = time_grid(spec.t, spec.snapshots_per_unit);
    let names = vec![format!("M[t={}]({})", spec.t, h.name())];
    let params = spec.params;
    let ens = run_ensemble(&names, opts, |seed| {
        let init = sample_stationary(spec.rho, map.sites(), stream_seed(seed, INIT_STREAM))?;
        let mut sim = Simulator::new(params, init, seed, &ObserverSet::default())?;
        let y0 = field_value(&w_h, sim.config(), spec.rho);
        let mut integral = 0.0;
        let mut prev = (0.0, field_value(&w_lap, sim.config(), spec.rho));
        for &s in &grid[1..] {
            sim.advance_to(s)?;
            let cur = field_value(&w_lap, sim.config(), spec.rho);
            integral += 0.5 * (s - prev.0) * (cur + prev.1);
            prev = (s, cur);
        }
        let yt = field_value(&w_h, sim.config(), spec.rho);
        Ok(Sample {
            values: vec![yt - y0 - integral],
            events: sim.events(),
        })
    })?;
    let theory = 2.0 * c * spec.t * gradient_norm_2beta_sq(h, regime);
    let row = MomentRow::new(
        h.name().to_string(),
        None,
        spec.t,
        &ens.stats(),
        0,
        theory,
        spec.rel_tol,
    );
    Ok(MartingaleReport {
        regime: regime.name().to_string(),
        sites: map.sites(),
        row,
        seeds: ens.seeds,
        events: ens.events,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CltSpec {
    pub params: SlowBondParams,
    pub rho: f64,
    pub us: Vec<f64>,
    pub times: Vec<f64>,
    /// Number of diffusive lengths `sqrt(2t)` kept clear on each side.
    pub guard: f64,
    pub rel_tol: Option<f64>,
}

impl CltSpec {
    fn validate(&self) -> Result<(f64, f64)> {
        if self.us.is_empty() || self.times.is_empty() {
            return usage("clt experiment needs at least one u and one t");
        }
        crate::engine::check_snapshot_times(&self.times, f64::INFINITY)?;
        if self.times[0] <= 0.0 {
            return usage("clt times must be positive");
        }
        let u_max = self.us.iter().fold(0.0f64, |a, u| a.max(u.abs()));
        Ok((u_max, *self.times.last().expect("non-empty")))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CltReport {
    pub regime: String,
    pub sites: usize,
    pub guard: f64,
    pub rows: Vec<MomentRow>,
    /// Trajectories on which the order identity failed for some `k <= 10`.
    pub identity_violations: u64,
    pub seeds: Vec<SeedRange>,
    pub events: u64,
}

impl CltReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_rows(out, &self.rows)
    }

    pub fn pass(&self) -> bool {
        self.identity_violations == 0 && self.rows.iter().all(|r| r.pass)
    }

    pub fn row(&self, observable: &str, u: f64, t: f64) -> Option<&MomentRow> {
        self.rows
            .iter()
            .find(|r| r.observable == observable && r.u == Some(u) && r.t == t)
    }
}

/// `Var(J^n_u(t)/√n)` from the stationary start against the regime formula.
pub fn current_clt_experiment(spec: &CltSpec, opts: &EnsembleOptions) -> Result<CltReport> {
    let (u_max, t_max) = spec.validate()?;
    let regime = Regime::of(&spec.params);
    let n = spec.params.n();
    let map = SiteMap::new(n, guarded_sites(n, u_max, t_max, spec.guard)?)?;
    let bonds: Vec<usize> = spec.us.iter().map(|&u| map.bond_of(u)).collect();
    let mut distinct = bonds.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != bonds.len() {
        return usage("two values of u map to the same bond");
    }
    let observers = ObserverSet {
        watched_bonds: bonds,
        tagged_site: None,
    };
    let mut names = Vec::new();
    for &t in &spec.times {
        for &u in &spec.us {
            names.push(format!("J[u={u},t={t}]"));
        }
    }
    let scale = 1.0 / (n as f64).sqrt();
    let params = spec.params;
    let ens = run_ensemble(&names, opts, |seed| {
        let init = sample_stationary(spec.rho, map.sites(), stream_seed(seed, INIT_STREAM))?;
        let mut sim = Simulator::new(params, init, seed, &observers)?;
        let mut values = Vec::with_capacity(names.len());
        for &t in &spec.times {
            sim.advance_to(t)?;
            values.extend(sim.currents().counts().iter().map(|&j| j as f64 * scale));
        }
        Ok(Sample {
            values,
            events: sim.events(),
        })
    })?;
    let st = ens.stats();
    let mut rows = Vec::new();
    for (ti, &t) in spec.times.iter().enumerate() {
        for (ui, &u) in spec.us.iter().enumerate() {
            let theory = current_variance(regime, spec.rho, u, t)?;
            let k = ti * spec.us.len() + ui;
            rows.push(MomentRow::new(
                "current".into(),
                Some(u),
                t,
                &st,
                k,
                theory,
                spec.rel_tol,
            ));
        }
    }
    Ok(CltReport {
        regime: regime.name().to_string(),
        sites: map.sites(),
        guard: spec.guard,
        rows,
        identity_violations: 0,
        seeds: vec![ens.seeds],
        events: ens.events,
    })
}

/// Largest `k` checked in the order identity on every trajectory.
pub const IDENTITY_K_MAX: usize = 10;

/// `Var(X^n_u(t)/√n)` for a particle tagged at `floor(un)` under the
/// conditioned stationary start, against `current_variance / ρ²`. The order
/// identity linking `X` and the current through the bond left of the tagged
/// particle is checked on every trajectory at every time.
pub fn tagged_clt_experiment(spec: &CltSpec, opts: &EnsembleOptions) -> Result<CltReport> {
    let (u_max, t_max) = spec.validate()?;
    let regime = Regime::of(&spec.params);
    let n = spec.params.n();
    let map = SiteMap::new(n, guarded_sites(n, u_max, t_max, spec.guard)?)?;
    let scale = 1.0 / (n as f64).sqrt();
    let mut plan = SeedPlan::new(opts.base_seed);
    let mut rows = Vec::new();
    let mut violations = 0u64;
    let mut events = 0u64;
    for &u in &spec.us {
        let site = map.site_of(u);
        let observers = ObserverSet {
            watched_bonds: vec![map.bond_of(u)],
            tagged_site: Some(site),
        };
        let mut names = Vec::new();
        for &t in &spec.times {
            names.push(format!("X[u={u},t={t}]"));
            names.push(format!("identity_failures[u={u},t={t}]"));
        }
        let params = spec.params;
        let seeds = plan.take(opts.m)?;
        let ens = run_seeds(&names, seeds, opts.workers, |seed| {
            let init = sample_conditioned(spec.rho, map.sites(), site, stream_seed(seed, INIT_STREAM))?;
            let mut sim = Simulator::new(params, init, seed, &observers)?;
            let mut values = Vec::with_capacity(names.len());
            for &t in &spec.times {
                sim.advance_to(t)?;
                let tagged = sim
                    .tagged()
                    .ok_or_else(|| Error::Bookkeeping("tagged observer missing".into()))?;
                let bad = order_identity_violation(sim.config(), sim.currents().counts()[0], &tagged, IDENTITY_K_MAX);
                values.push(tagged.displacement as f64 * scale);
                values.push(if bad.is_some() { 1.0 } else { 0.0 });
            }
            Ok(Sample {
                values,
                events: sim.events(),
            })
        })?;
        events += ens.events;
        let st = ens.stats();
        for (ti, &t) in spec.times.iter().enumerate() {
            let theory = tagged_variance(regime, spec.rho, u, t)?;
            // X^n is an O(1) shift of a centered O(sqrt n) quantity (the
            // conditioning and any wall nearby bias it), so only the
            // variance is gated.
            rows.push(MomentRow::with_mean_gate(
                "tagged".into(),
                Some(u),
                t,
                &st,
                2 * ti,
                theory,
                spec.rel_tol,
                false,
            ));
            violations += ens.column(2 * ti + 1).sum::<f64>() as u64;
        }
    }
    Ok(CltReport {
        regime: regime.name().to_string(),
        sites: map.sites(),
        guard: spec.guard,
        rows,
        identity_violations: violations,
        seeds: plan.issued().to_vec(),
        events,
    })
}
