//! Exact generator of the process on small tori, used as an oracle for the
//! Monte Carlo engine.
//!
//! States are the `2^n` configurations, encoded with site `x` as bit `x`.

use crate::error::{usage, Error, Result};
use crate::lattice::{swap_rate, SlowBondParams};

/// Largest torus for which the generator is built (4096 states).
pub const MAX_GENERATOR_SITES: usize = 12;

/// Sparse rate matrix `L` with `L[i][j] >= 0` off the diagonal and zero row
/// sums.
#[derive(Debug, Clone)]
pub struct GeneratorMatrix {
    sites: usize,
    /// Off-diagonal entries per row, merged by target state.
    rows: Vec<Vec<(usize, f64)>>,
    diagonal: Vec<f64>,
}

impl GeneratorMatrix {
    pub fn sites(&self) -> usize {
        self.sites
    }

    pub fn dimension(&self) -> usize {
        self.diagonal.len()
    }

    pub fn entry(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return self.diagonal[from];
        }
        self.rows[from].iter().find(|(j, _)| *j == to).map_or(0.0, |&(_, r)| r)
    }

    pub fn row(&self, from: usize) -> &[(usize, f64)] {
        &self.rows[from]
    }

    pub fn row_sum(&self, from: usize) -> f64 {
        self.diagonal[from] + self.rows[from].iter().map(|(_, r)| r).sum::<f64>()
    }

    /// `p L` for a row vector `p`.
    pub fn left_apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = p.iter().zip(&self.diagonal).map(|(a, d)| a * d).collect();
        for (i, row) in self.rows.iter().enumerate() {
            let pi = p[i];
            if pi == 0.0 {
                continue;
            }
            for &(j, r) in row {
                out[j] += pi * r;
            }
        }
        out
    }

    fn max_exit_rate(&self) -> f64 {
        self.diagonal.iter().fold(0.0f64, |m, d| m.max(-d))
    }
}

pub fn build_generator(params: &SlowBondParams) -> Result<GeneratorMatrix> {
    let sites = params.n();
    if sites > MAX_GENERATOR_SITES {
        return Err(Error::Refused(format!(
            "generator for n = {sites} would have 2^{sites} states; the limit is n <= {MAX_GENERATOR_SITES}"
        )));
    }
    let dim = 1usize << sites;
    let rates: Vec<f64> = (0..sites).map(|b| swap_rate(params, b)).collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(dim);
    let mut diagonal = Vec::with_capacity(dim);
    for state in 0..dim {
        let mut row: Vec<(usize, f64)> = Vec::new();
        let mut exit = 0.0;
        for (b, &rate) in rates.iter().enumerate() {
            let r = (b + 1) % sites;
            if ((state >> b) & 1) == ((state >> r) & 1) || rate == 0.0 {
                continue;
            }
            let target = state ^ (1 << b) ^ (1 << r);
            match row.iter_mut().find(|(j, _)| *j == target) {
                Some(e) => e.1 += rate,
                None => row.push((target, rate)),
            }
            exit += rate;
        }
        row.sort_by_key(|e| e.0);
        rows.push(row);
        diagonal.push(-exit);
    }
    Ok(GeneratorMatrix { sites, rows, diagonal })
}

/// Bernoulli(`rho`) product measure as a probability vector over states.
pub fn bernoulli_product_vector(sites: usize, rho: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return usage(format!("rho {rho} outside [0, 1]"));
    }
    if sites > MAX_GENERATOR_SITES {
        return Err(Error::Refused(format!("n = {sites} exceeds {MAX_GENERATOR_SITES}")));
    }
    Ok((0..1usize << sites)
        .map(|s| {
            let k = s.count_ones() as i32;
            rho.powi(k) * (1.0 - rho).powi(sites as i32 - k)
        })
        .collect())
}

/// `init_dist * exp(micro_time * L)` by uniformization.
///
/// With `Λ` the largest exit rate and `P = I + L/Λ`, the result is
/// `Σ_k Poisson(k; Λt) init P^k`; the series is truncated once the remaining
/// Poisson mass is below 1e-15.
pub fn exact_distribution(gen: &GeneratorMatrix, init_dist: &[f64], micro_time: f64) -> Result<Vec<f64>> {
    if init_dist.len() != gen.dimension() {
        return usage(format!(
            "distribution has {} entries, generator has {} states",
            init_dist.len(),
            gen.dimension()
        ));
    }
    if init_dist.iter().any(|&p| !(p >= 0.0)) {
        return usage("distribution has negative or NaN entries");
    }
    let total: f64 = init_dist.iter().sum();
    if (total - 1.0).abs() > 1e-10 {
        return usage(format!("distribution sums to {total}, not 1"));
    }
    if !(micro_time >= 0.0) || !micro_time.is_finite() {
        return usage(format!("time must be finite and >= 0, got {micro_time}"));
    }
    let lambda = gen.max_exit_rate();
    if micro_time == 0.0 || lambda == 0.0 {
        return Ok(init_dist.to_vec());
    }
    let mean = lambda * micro_time;
    let tail_tol = 1e-15;

    let mut acc = vec![0.0; init_dist.len()];
    let mut v = init_dist.to_vec();
    let mut cumulative = 0.0;
    let mut k: u64 = 0;
    // Past the mode with this much spare mass the truncation is safe.
    let k_max = (mean + 12.0 * mean.sqrt() + 50.0).ceil() as u64;
    loop {
        let log_w = (k as f64) * mean.ln() - mean - libm::lgamma(k as f64 + 1.0);
        let w = log_w.exp();
        if w > 0.0 {
            for (a, x) in acc.iter_mut().zip(&v) {
                *a += w * x;
            }
        }
        cumulative += w;
        if (k as f64) > mean && 1.0 - cumulative < tail_tol || k >= k_max {
            break;
        }
        // v <- v P = v + (v L) / Λ
        let vl = gen.left_apply(&v);
        for (x, d) in v.iter_mut().zip(vl) {
            *x += d / lambda;
        }
        k += 1;
    }
    for a in acc.iter_mut() {
        if *a < 0.0 && *a >= -1e-12 {
            *a = 0.0;
        }
    }
    let sum: f64 = acc.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::Numerical(format!(
            "uniformization lost mass: result sums to {sum}"
        )));
    }
    Ok(acc)
}

/// `max |(ν_ρ L)_j|`.
pub fn stationarity_residual(gen: &GeneratorMatrix, rho: f64) -> Result<f64> {
    let nu = bernoulli_product_vector(gen.sites(), rho)?;
    Ok(gen.left_apply(&nu).into_iter().fold(0.0f64, |m, x| m.max(x.abs())))
}

/// Total-variation distance `½ Σ |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
