//! Configurations, jump rates, initial-measure sampling and the empirical
//! measure on the discrete torus.
//!
//! Sites are labelled `0..sites`. Bond `b` joins `b` and `b + 1 (mod sites)`,
//! so the last bond `(sites - 1, 0)` wraps around; that bond is the slow one.
//! Macroscopically the slow bond sits at the point `0 ≡ 1` of the torus.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{usage, Error, Result};
use crate::rng::seeded;

/// Slow-down exponent of the slow bond. `Infinite` switches the bond off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Beta {
    Finite(f64),
    Infinite,
}

impl Beta {
    pub fn is_infinite(self) -> bool {
        matches!(self, Beta::Infinite)
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Beta::Finite(b) => b,
            Beta::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Finite(b) => write!(f, "{b}"),
            Beta::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("infinity") {
            return Ok(Beta::Infinite);
        }
        let b: f64 = s
            .parse()
            .map_err(|_| Error::Usage(format!("cannot parse beta from {s:?}")))?;
        if b.is_infinite() && b > 0.0 {
            return Ok(Beta::Infinite);
        }
        if !(b >= 0.0) || !b.is_finite() {
            return usage(format!("beta must be >= 0 or inf, got {s}"));
        }
        Ok(Beta::Finite(b))
    }
}

impl Serialize for Beta {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Beta::Finite(b) => s.serialize_f64(*b),
            Beta::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Beta {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(b) => Beta::from_str(&b.to_string()).map_err(serde::de::Error::custom),
            Raw::Text(s) => Beta::from_str(&s).map_err(serde::de::Error::custom),
        }
    }
}

/// `(n, alpha, beta)`: the scaling parameter and the slow-bond law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlowBondParams {
    n: usize,
    alpha: f64,
    beta: Beta,
}

impl SlowBondParams {
    pub fn new(n: usize, alpha: f64, beta: Beta) -> Result<Self> {
        if n < 2 {
            return usage(format!("n must be >= 2, got {n}"));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            return usage(format!("alpha must be a positive finite number, got {alpha}"));
        }
        if let Beta::Finite(b) = beta {
            if !(b >= 0.0) || !b.is_finite() {
                return usage(format!("beta must be >= 0 or inf, got {b}"));
            }
        }
        Ok(Self { n, alpha, beta })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> Beta {
        self.beta
    }

    /// `alpha * n^(-beta)`, exactly zero when `beta` is infinite.
    pub fn slow_rate(&self) -> f64 {
        match self.beta {
            Beta::Finite(b) => self.alpha * (self.n as f64).powf(-b),
            Beta::Infinite => 0.0,
        }
    }
}

/// Rate of bond `bond_index` on the `n`-site torus of `params`.
pub fn swap_rate(params: &SlowBondParams, bond_index: usize) -> Result<f64> {
    swap_rate_on(params, params.n(), bond_index)
}

/// Rate of a bond on a torus of `sites` sites whose slow bond is
/// `(sites - 1, 0)`. Rates never depend on the configuration.
pub fn swap_rate_on(params: &SlowBondParams, sites: usize, bond_index: usize) -> Result<f64> {
    if bond_index >= sites {
        return usage(format!("bond index {bond_index} out of range 0..{sites}"));
    }
    Ok(if bond_index == sites - 1 {
        params.slow_rate()
    } else {
        1.0
    })
}

/// Occupancy of every site of the torus, one byte (0 or 1) per site.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Configuration {
    occupancy: Vec<u8>,
}

impl Configuration {
    pub fn from_occupancy(occupancy: Vec<u8>) -> Result<Self> {
        if occupancy.len() < 2 {
            return usage("a configuration needs at least 2 sites");
        }
        if let Some(x) = occupancy.iter().position(|&v| v > 1) {
            return usage(format!("site {x} has occupancy {} (expected 0 or 1)", occupancy[x]));
        }
        Ok(Self { occupancy })
    }

    pub fn empty(sites: usize) -> Self {
        Self {
            occupancy: vec![0; sites],
        }
    }

    pub fn len(&self) -> usize {
        self.occupancy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.occupancy.is_empty()
    }

    pub fn occupancy(&self) -> &[u8] {
        &self.occupancy
    }

    pub(crate) fn occupancy_mut(&mut self) -> &mut [u8] {
        &mut self.occupancy
    }

    pub fn get(&self, x: usize) -> u8 {
        self.occupancy[x]
    }

    pub fn particle_count(&self) -> usize {
        self.occupancy.iter().map(|&v| v as usize).sum()
    }

    /// Bit-encoding used by the exact generator (site `x` is bit `x`).
    pub fn to_index(&self) -> usize {
        self.occupancy
            .iter()
            .enumerate()
            .fold(0usize, |acc, (x, &v)| acc | ((v as usize) << x))
    }

    pub fn from_index(index: usize, sites: usize) -> Self {
        Self {
            occupancy: (0..sites).map(|x| ((index >> x) & 1) as u8).collect(),
        }
    }
}

/// Exchanges the occupancies at the two ends of `bond_index`.
pub fn apply_swap(config: &Configuration, bond_index: usize) -> Result<Configuration> {
    let sites = config.len();
    if bond_index >= sites {
        return usage(format!("bond index {bond_index} out of range 0..{sites}"));
    }
    let mut out = config.clone();
    out.occupancy.swap(bond_index, (bond_index + 1) % sites);
    Ok(out)
}

/// Maps sites to macroscopic coordinates.
///
/// `n` is the scaling parameter, `sites` the torus size (`sites == n` for
/// the unit torus; larger tori stand in for the whole line).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SiteMap {
    n: usize,
    sites: usize,
}

impl SiteMap {
    pub fn new(n: usize, sites: usize) -> Result<Self> {
        if n < 2 || sites < 2 {
            return usage(format!("site map needs n, sites >= 2 (got n={n}, sites={sites})"));
        }
        Ok(Self { n, sites })
    }

    pub fn unit(n: usize) -> Result<Self> {
        Self::new(n, n)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn sites(&self) -> usize {
        self.sites
    }

    /// `x / n`, in `[0, sites/n)`.
    pub fn macro_point(&self, x: usize) -> f64 {
        x as f64 / self.n as f64
    }

    /// Coordinate with the slow bond at 0: sites right of the slow bond are
    /// `0, 1/n, ...`, sites left of it are `-1/n, -2/n, ...`.
    pub fn centered_point(&self, x: usize) -> f64 {
        if x < self.sites.div_ceil(2) {
            x as f64 / self.n as f64
        } else {
            (x as f64 - self.sites as f64) / self.n as f64
        }
    }

    /// Site `floor(u n)` reduced onto the torus.
    pub fn site_of(&self, u: f64) -> usize {
        let k = (u * self.n as f64).floor() as i64;
        k.rem_euclid(self.sites as i64) as usize
    }

    /// Bond `{floor(u n) - 1, floor(u n)}`, the bond whose current is `J_u`.
    pub fn bond_of(&self, u: f64) -> usize {
        let k = (u * self.n as f64).floor() as i64 - 1;
        k.rem_euclid(self.sites as i64) as usize
    }

    pub fn slow_bond(&self) -> usize {
        self.sites - 1
    }
}

/// Initial density profile on `[0, 1)`.
#[derive(Clone)]
pub enum DensityProfile {
    Constant(f64),
    /// `a` on `[0, 1/2)`, `b` on `[1/2, 1)`.
    Step {
        a: f64,
        b: f64,
    },
    /// Sorted `(u, rho)` pairs, linearly interpolated and clamped at the ends.
    Table(Vec<(f64, f64)>),
    Callable(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for DensityProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DensityProfile::Constant(c) => write!(f, "Constant({c})"),
            DensityProfile::Step { a, b } => write!(f, "Step({a}, {b})"),
            DensityProfile::Table(t) => write!(f, "Table({} points)", t.len()),
            DensityProfile::Callable(_) => f.write_str("Callable"),
        }
    }
}

impl DensityProfile {
    pub fn constant(rho: f64) -> Result<Self> {
        check_density(rho)?;
        Ok(DensityProfile::Constant(rho))
    }

    pub fn step(a: f64, b: f64) -> Result<Self> {
        check_density(a)?;
        check_density(b)?;
        Ok(DensityProfile::Step { a, b })
    }

    pub fn table(mut points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return usage("profile table is empty");
        }
        for &(u, r) in &points {
            if !u.is_finite() {
                return usage(format!("profile abscissa {u} is not finite"));
            }
            check_density(r)?;
        }
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(DensityProfile::Table(points))
    }

    /// The callable is sampled on a fine grid to check its range.
    pub fn callable(f: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Result<Self> {
        for k in 0..1024 {
            check_density(f(k as f64 / 1024.0))?;
        }
        Ok(DensityProfile::Callable(Arc::new(f)))
    }

    /// Reads `(u, rho0(u))` pairs from a headerless or headed CSV file.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut points = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() != 2 {
                return usage(format!("profile csv row {i} has {} fields, expected 2", rec.len()));
            }
            match (rec[0].parse::<f64>(), rec[1].parse::<f64>()) {
                (Ok(u), Ok(r)) => points.push((u, r)),
                _ if i == 0 => continue, // header
                _ => return usage(format!("profile csv row {i} is not numeric")),
            }
        }
        Self::table(points)
    }

    /// Parses `constant:rho`, `step:a,b` or a path to a CSV table.
    pub fn parse(spec: &str) -> Result<Self> {
        let spec = spec.trim();
        if let Some(rest) = spec.strip_prefix("constant:") {
            let rho = parse_f64(rest, "constant profile")?;
            return Self::constant(rho);
        }
        if let Some(rest) = spec.strip_prefix("step:") {
            let parts: Vec<&str> = rest.split(',').collect();
            if parts.len() != 2 {
                return usage(format!("step profile needs two values, got {rest:?}"));
            }
            return Self::step(
                parse_f64(parts[0], "step profile")?,
                parse_f64(parts[1], "step profile")?,
            );
        }
        let path = spec.strip_prefix("csv:").unwrap_or(spec);
        if path.ends_with(".csv") || spec.starts_with("csv:") {
            return Self::from_csv(Path::new(path));
        }
        usage(format!(
            "unknown profile {spec:?} (expected constant:rho, step:a,b or a .csv table)"
        ))
    }

    pub fn eval(&self, u: f64) -> f64 {
        match self {
            DensityProfile::Constant(c) => *c,
            DensityProfile::Step { a, b } => {
                let w = u.rem_euclid(1.0);
                if w < 0.5 {
                    *a
                } else {
                    *b
                }
            }
            DensityProfile::Table(t) => interpolate(t, u),
            DensityProfile::Callable(f) => f(u),
        }
    }

    /// Canonical text form used in manifests; callables have none.
    pub fn describe(&self) -> String {
        match self {
            DensityProfile::Constant(c) => format!("constant:{c}"),
            DensityProfile::Step { a, b } => format!("step:{a},{b}"),
            DensityProfile::Table(t) => {
                let body: Vec<String> = t.iter().map(|(u, r)| format!("{u}:{r}")).collect();
                format!("table:{}", body.join(";"))
            }
            DensityProfile::Callable(_) => "callable".to_string(),
        }
    }
}

fn interpolate(t: &[(f64, f64)], u: f64) -> f64 {
    let first = t[0];
    let last = t[t.len() - 1];
    if u <= first.0 {
        return first.1;
    }
    if u >= last.0 {
        return last.1;
    }
    let i = t.partition_point(|p| p.0 <= u);
    let (u0, r0) = t[i - 1];
    let (u1, r1) = t[i];
    if u1 == u0 {
        return r1;
    }
    r0 + (r1 - r0) * (u - u0) / (u1 - u0)
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Usage(format!("{what}: cannot parse {s:?} as a number")))
}

fn check_density(rho: f64) -> Result<()> {
    if (0.0..=1.0).contains(&rho) {
        Ok(())
    } else {
        usage(format!("density {rho} outside [0, 1]"))
    }
}

/// Product Bernoulli measure with `P[eta(x) = 1] = rho0(x/n)` on `n` sites.
pub fn sample_bernoulli_product(profile: &DensityProfile, n: usize, seed: u64) -> Result<Configuration> {
    if n < 2 {
        return usage(format!("n must be >= 2, got {n}"));
    }
    let mut rng = seeded(seed);
    let occupancy = (0..n)
        .map(|x| {
            let p = profile.eval(x as f64 / n as f64);
            u8::from(rng.random::<f64>() < p)
        })
        .collect();
    Ok(Configuration { occupancy })
}

/// Product Bernoulli(`rho`) on `sites` sites.
pub fn sample_stationary(rho: f64, sites: usize, seed: u64) -> Result<Configuration> {
    check_density(rho)?;
    sample_bernoulli_product(&DensityProfile::Constant(rho), sites, seed)
}

/// Bernoulli(`rho`) product conditioned on an occupied `tagged_site`.
pub fn sample_conditioned(rho: f64, n: usize, tagged_site: usize, seed: u64) -> Result<Configuration> {
    if !(rho > 0.0 && rho < 1.0) {
        return usage(format!("conditioned sampling needs rho in (0, 1), got {rho}"));
    }
    if tagged_site >= n {
        return usage(format!("tagged site {tagged_site} out of range 0..{n}"));
    }
    let mut config = sample_stationary(rho, n, seed)?;
    config.occupancy[tagged_site] = 1;
    Ok(config)
}

/// `(1/n) sum_x H(x/n) eta(x)` over the sites of `config`.
pub fn empirical_pairing(config: &Configuration, h: impl Fn(f64) -> f64) -> f64 {
    let n = config.len() as f64;
    config
        .occupancy
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == 1)
        .map(|(x, _)| h(x as f64 / n))
        .sum::<f64>()
        / n
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(v: &[u8]) -> Configuration {
        Configuration::from_occupancy(v.to_vec()).unwrap()
    }

    #[test]
    fn slow_rate_values() {
        let p = SlowBondParams::new(10, 2.0, Beta::Finite(1.0)).unwrap();
        assert!((swap_rate(&p, 9).unwrap() - 0.2).abs() < 1e-15);
        let p = SlowBondParams::new(10, 2.0, Beta::Finite(0.0)).unwrap();
        assert_eq!(swap_rate(&p, 9).unwrap(), 2.0);
        let p = SlowBondParams::new(10, 2.0, Beta::Infinite).unwrap();
        assert_eq!(swap_rate(&p, 9).unwrap(), 0.0);
        for b in 0..9 {
            assert_eq!(swap_rate(&p, b).unwrap(), 1.0);
        }
        assert!(matches!(swap_rate(&p, 10), Err(Error::Usage(_))));
    }

    #[test]
    fn params_validation() {
        assert!(SlowBondParams::new(1, 1.0, Beta::Finite(0.0)).is_err());
        assert!(SlowBondParams::new(4, 0.0, Beta::Finite(0.0)).is_err());
        assert!(SlowBondParams::new(4, 1.0, Beta::Finite(-0.5)).is_err());
        assert_eq!("inf".parse::<Beta>().unwrap(), Beta::Infinite);
        assert_eq!("1.5".parse::<Beta>().unwrap(), Beta::Finite(1.5));
        assert!("-1".parse::<Beta>().is_err());
    }

    #[test]
    fn beta_serde() {
        let p = SlowBondParams::new(5, 1.0, Beta::Infinite).unwrap();
        let s = serde_json::to_string(&p).unwrap();
        assert!(s.contains("\"inf\""));
        let back: SlowBondParams = serde_json::from_str(&s).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn swap_examples() {
        assert_eq!(apply_swap(&cfg(&[1, 0, 0]), 0).unwrap(), cfg(&[0, 1, 0]));
        assert_eq!(apply_swap(&cfg(&[1, 1, 0]), 0).unwrap(), cfg(&[1, 1, 0]));
        assert_eq!(apply_swap(&cfg(&[0, 0, 1]), 2).unwrap(), cfg(&[1, 0, 0]));
        assert!(apply_swap(&cfg(&[0, 0, 1]), 3).is_err());
    }

    #[test]
    fn degenerate_bernoulli() {
        let ones = sample_bernoulli_product(&DensityProfile::constant(1.0).unwrap(), 50, 3).unwrap();
        assert_eq!(ones.particle_count(), 50);
        let zeros = sample_bernoulli_product(&DensityProfile::constant(0.0).unwrap(), 50, 3).unwrap();
        assert_eq!(zeros.particle_count(), 0);
    }

    #[test]
    fn bernoulli_half_mean() {
        // Binomial(10^4, 1/2): sd = 50, so a 200 deviation is a 4-sigma event.
        let c = sample_bernoulli_product(&DensityProfile::constant(0.5).unwrap(), 10_000, 11).unwrap();
        let mean = c.particle_count() as f64 / 1e4;
        assert!((mean - 0.5).abs() <= 0.02, "mean {mean}");
    }

    #[test]
    fn bernoulli_is_deterministic() {
        let p = DensityProfile::step(0.9, 0.1).unwrap();
        let a = sample_bernoulli_product(&p, 300, 42).unwrap();
        let b = sample_bernoulli_product(&p, 300, 42).unwrap();
        assert_eq!(a, b);
        let c = sample_bernoulli_product(&p, 300, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn conditioned_sampling() {
        for seed in 0..200 {
            let c = sample_conditioned(0.5, 4, 0, seed).unwrap();
            assert_eq!(c.get(0), 1);
        }
        assert!(sample_conditioned(0.0, 4, 0, 1).is_err());
        assert!(sample_conditioned(1.0, 4, 0, 1).is_err());
        assert!(sample_conditioned(0.5, 4, 4, 1).is_err());
        let sparse = sample_conditioned(1e-9, 50, 7, 9).unwrap();
        assert_eq!(sparse.particle_count(), 1);
        assert_eq!(sparse.get(7), 1);
    }

    #[test]
    fn conditioned_other_sites_chi_square() {
        // Sites 1..4 of a 4-site conditioned sample must be iid Bernoulli(0.3):
        // chi-square over the 8 patterns, 7 dof, 1% critical value 18.475.
        let rho = 0.3;
        let m = 100_000u64;
        let mut counts = [0u64; 8];
        for seed in 0..m {
            let c = sample_conditioned(rho, 4, 0, seed).unwrap();
            let k = (c.get(1) | (c.get(2) << 1) | (c.get(3) << 2)) as usize;
            counts[k] += 1;
        }
        let chi2: f64 = counts
            .iter()
            .enumerate()
            .map(|(k, &obs)| {
                let ones = (k as u32).count_ones() as i32;
                let p = rho.powi(ones) * (1.0 - rho).powi(3 - ones);
                let e = p * m as f64;
                (obs as f64 - e).powi(2) / e
            })
            .sum();
        assert!(chi2 < 18.475, "chi2 = {chi2}");
    }

    #[test]
    fn pairing_examples() {
        assert_eq!(empirical_pairing(&cfg(&[1, 1, 1, 1]), |_| 1.0), 1.0);
        assert_eq!(empirical_pairing(&cfg(&[0, 0, 0, 0]), |u| u * 7.0 + 1.0), 0.0);
        assert!((empirical_pairing(&cfg(&[1, 0, 1, 0]), |u| u) - 0.125).abs() < 1e-15);
    }

    #[test]
    fn profiles() {
        let p = DensityProfile::parse("step:1,0.25").unwrap();
        assert_eq!(p.eval(0.1), 1.0);
        assert_eq!(p.eval(0.5), 0.25);
        assert_eq!(DensityProfile::parse("constant:0.4").unwrap().eval(0.9), 0.4);
        assert!(DensityProfile::parse("constant:1.4").is_err());
        assert!(DensityProfile::parse("wobble:1").is_err());
        let t = DensityProfile::table(vec![(1.0, 0.0), (0.0, 1.0)]).unwrap();
        assert!((t.eval(0.25) - 0.75).abs() < 1e-15);
        assert_eq!(t.eval(-1.0), 1.0);
    }

    #[test]
    fn profile_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "u,rho\n0,0.2\n0.5,0.6\n1,0.2\n").unwrap();
        let p = DensityProfile::parse(path.to_str().unwrap()).unwrap();
        assert!((p.eval(0.25) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn site_map_geometry() {
        let m = SiteMap::new(100, 840).unwrap();
        assert_eq!(m.bond_of(0.0), 839);
        assert_eq!(m.slow_bond(), 839);
        assert_eq!(m.bond_of(0.2), 19);
        assert_eq!(m.site_of(0.2), 20);
        assert_eq!(m.centered_point(0), 0.0);
        assert!((m.centered_point(839) + 0.01).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn swap_is_involution(bits in proptest::collection::vec(0u8..2, 2..40), b in 0usize..1000) {
            let c = Configuration::from_occupancy(bits).unwrap();
            let b = b % c.len();
            let twice = apply_swap(&apply_swap(&c, b).unwrap(), b).unwrap();
            prop_assert_eq!(&twice, &c);
        }

        #[test]
        fn swaps_conserve_particles(bits in proptest::collection::vec(0u8..2, 2..40),
                                    bonds in proptest::collection::vec(0usize..1000, 0..60)) {
            let mut c = Configuration::from_occupancy(bits).unwrap();
            let count = c.particle_count();
            for b in bonds {
                c = apply_swap(&c, b % c.len()).unwrap();
            }
            prop_assert_eq!(c.particle_count(), count);
        }

        #[test]
        fn index_roundtrip(index in 0usize..4096) {
            prop_assert_eq!(Configuration::from_index(index, 12).to_index(), index);
        }
    }
}
