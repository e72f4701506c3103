//! Two-sided test functions with prescribed behaviour at the slow bond.
//!
//! A function is stored as a left piece (used on `u < 0`) and a right piece
//! (used on `u >= 0`). Each piece reports its value and first three
//! derivatives, so one-sided limits at 0 are exact evaluations of the pieces.

use std::fmt;
use std::sync::Arc;

use crate::error::{usage, Error, Result};
use crate::lattice::{Beta, SlowBondParams};

/// Value and first three derivatives at a point.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Jet {
    pub value: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl std::ops::Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        Jet {
            value: self.value + o.value,
            d1: self.d1 + o.d1,
            d2: self.d2 + o.d2,
            d3: self.d3 + o.d3,
        }
    }
}

impl std::ops::Mul<Jet> for f64 {
    type Output = Jet;
    fn mul(self, j: Jet) -> Jet {
        Jet {
            value: self * j.value,
            d1: self * j.d1,
            d2: self * j.d2,
            d3: self * j.d3,
        }
    }
}

pub trait Piece: Send + Sync {
    fn jet(&self, u: f64) -> Jet;
}

impl<F: Fn(f64) -> Jet + Send + Sync> Piece for F {
    fn jet(&self, u: f64) -> Jet {
        self(u)
    }
}

/// Limiting behaviour at the slow bond, one per range of `beta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Regime {
    /// `beta < 1`.
    Sub,
    /// `beta = 1`, with the slow-bond constant `alpha`.
    Critical { alpha: f64 },
    /// `beta > 1`, including `beta = inf`.
    Super,
}

impl Regime {
    pub fn critical(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return usage(format!("critical regime needs alpha > 0, got {alpha}"));
        }
        Ok(Regime::Critical { alpha })
    }

    pub fn of(params: &SlowBondParams) -> Self {
        match params.beta() {
            Beta::Finite(b) if b < 1.0 => Regime::Sub,
            Beta::Finite(1.0) => Regime::Critical { alpha: params.alpha() },
            _ => Regime::Super,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Regime::Sub => "sub",
            Regime::Critical { .. } => "critical",
            Regime::Super => "super",
        }
    }

    pub fn alpha(&self) -> Option<f64> {
        match self {
            Regime::Critical { alpha } => Some(*alpha),
            _ => None,
        }
    }

    /// Parses `sub`, `super` or `critical` (which needs `alpha`).
    pub fn parse(name: &str, alpha: Option<f64>) -> Result<Self> {
        match name {
            "sub" => Ok(Regime::Sub),
            "super" => Ok(Regime::Super),
            "critical" => match alpha {
                Some(a) => Regime::critical(a),
                None => usage("critical regime needs --alpha"),
            },
            other => usage(format!("unknown regime {other:?} (sub, critical, super)")),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Tolerance for the boundary conditions checked at construction.
pub const BOUNDARY_TOL: f64 = 1e-10;

#[derive(Clone)]
pub struct SBetaFunction {
    name: String,
    left: Arc<dyn Piece>,
    right: Arc<dyn Piece>,
    /// Beyond `|u| > window` the function and its derivatives are below 1e-16.
    window: f64,
}

impl fmt::Debug for SBetaFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SBetaFunction({}, window {})", self.name, self.window)
    }
}

impl SBetaFunction {
    pub fn two_sided(
        name: impl Into<String>,
        left: impl Piece + 'static,
        right: impl Piece + 'static,
        window: f64,
    ) -> Self {
        Self {
            name: name.into(),
            left: Arc::new(left),
            right: Arc::new(right),
            window,
        }
    }

    /// Same smooth piece on both sides.
    pub fn smooth(name: impl Into<String>, piece: impl Piece + Clone + 'static, window: f64) -> Self {
        Self::two_sided(name, piece.clone(), piece, window)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn window(&self) -> f64 {
        self.window
    }

    pub fn jet(&self, u: f64) -> Jet {
        if u < 0.0 {
            self.left.jet(u)
        } else {
            self.right.jet(u)
        }
    }

    /// Right-continuous at 0.
    pub fn eval(&self, u: f64) -> f64 {
        self.jet(u).value
    }

    pub fn left_limit(&self) -> Jet {
        self.left.jet(0.0)
    }

    pub fn right_limit(&self) -> Jet {
        self.right.jet(0.0)
    }

    pub fn jump(&self) -> f64 {
        self.right_limit().value - self.left_limit().value
    }

    /// Verifies the matching of one-sided derivatives of orders 1..=3 and the
    /// regime's boundary condition.
    pub fn check_regime(&self, regime: Regime) -> Result<()> {
        let (l, r) = (self.left_limit(), self.right_limit());
        let scale = 1.0 + l.value.abs().max(r.value.abs());
        for (k, a, b) in [(1, l.d1, r.d1), (2, l.d2, r.d2), (3, l.d3, r.d3)] {
            if (a - b).abs() > BOUNDARY_TOL * scale {
                return Err(Error::Usage(format!(
                    "{}: derivative of order {k} jumps at 0 ({a} vs {b})",
                    self.name
                )));
            }
        }
        let residual = match regime {
            Regime::Sub => r.value - l.value,
            Regime::Critical { alpha } => r.d1 - alpha * (r.value - l.value),
            Regime::Super => r.d1,
        };
        if residual.abs() > BOUNDARY_TOL * scale {
            return Err(Error::Usage(format!(
                "{} violates the {regime} boundary condition (residual {residual:e})",
                self.name
            )));
        }
        Ok(())
    }
}

/// `H(u)` for `u != 0` and `H'(0+)` at 0.
pub fn nabla_beta(h: &SBetaFunction) -> impl Fn(f64) -> f64 + '_ {
    move |u| h.jet(u).d1
}

/// `H''(u)` for `u != 0` and `H''(0+)` at 0.
pub fn delta_beta(h: &SBetaFunction) -> impl Fn(f64) -> f64 + '_ {
    move |u| h.jet(u).d2
}

/// `p(u) e^{-u^2}` for a cubic `p = c0 + c1 u + c2 u^2 + c3 u^3`.
pub fn gauss_cubic_jet(c: [f64; 4], u: f64) -> Jet {
    let g = (-u * u).exp();
    let p = c[0] + u * (c[1] + u * (c[2] + u * c[3]));
    let p1 = c[1] + u * (2.0 * c[2] + 3.0 * u * c[3]);
    let p2 = 2.0 * c[2] + 6.0 * u * c[3];
    let p3 = 6.0 * c[3];
    let u2 = u * u;
    Jet {
        value: p * g,
        d1: (p1 - 2.0 * u * p) * g,
        d2: (p2 - 4.0 * u * p1 + (4.0 * u2 - 2.0) * p) * g,
        d3: (p3 - 6.0 * u * p2 + (12.0 * u2 - 6.0) * p1 + (12.0 * u - 8.0 * u2 * u) * p) * g,
    }
}

/// `exp(-u^2 e^{-1/u^2})`: equal to 1 at 0 with every derivative vanishing
/// there, decaying like `e^{-u^2}`. Carries the jump of the family below
/// without disturbing derivative matching at any order.
pub fn flat_profile_jet(u: f64) -> Jet {
    if u.abs() < 0.05 {
        return Jet {
            value: 1.0,
            ..Jet::default()
        };
    }
    let e = (-1.0 / (u * u)).exp();
    let (i1, i2) = (1.0 / u, 1.0 / (u * u));
    let q = u * u * e;
    let q1 = e * (2.0 * u + 2.0 * i1);
    let q2 = e * (2.0 + 2.0 * i2 + 4.0 * i2 * i2);
    let q3 = e * (8.0 * i2 * i2 * i2 * i1 - 12.0 * i2 * i2 * i1);
    let psi = (-q).exp();
    Jet {
        value: psi,
        d1: -q1 * psi,
        d2: (q1 * q1 - q2) * psi,
        d3: (-q1 * q1 * q1 + 3.0 * q1 * q2 - q3) * psi,
    }
}

/// Smooth compactly supported bump `exp(-1/(1-s^2))`, `s = (u - center)/radius`.
pub fn bump_jet(center: f64, radius: f64, u: f64) -> Jet {
    let s = (u - center) / radius;
    if s.abs() >= 1.0 {
        return Jet::default();
    }
    let w = 1.0 - s * s;
    let f = -1.0 / w;
    let f1 = -2.0 * s / (w * w);
    let f2 = -(2.0 + 6.0 * s * s) / (w * w * w);
    let f3 = -(24.0 * s + 24.0 * s * s * s) / (w * w * w * w);
    let phi = f.exp();
    let r = radius;
    Jet {
        value: phi,
        d1: f1 * phi / r,
        d2: (f2 + f1 * f1) * phi / (r * r),
        d3: (f3 + 3.0 * f1 * f2 + f1 * f1 * f1) * phi / (r * r * r),
    }
}

/// Family member `H_±(u) = p(u) e^{-u^2} ± (jump/2) ψ(u)` with `ψ` the flat
/// profile. Derivatives of every order match at 0; `H(0+) - H(0-) = jump`
/// and `H'(0±) = p'(0)`.
pub fn gauss_cubic_with_jump(name: impl Into<String>, cubic: [f64; 4], jump: f64) -> SBetaFunction {
    let half = 0.5 * jump;
    SBetaFunction::two_sided(
        name,
        move |u: f64| gauss_cubic_jet(cubic, u) + (-half) * flat_profile_jet(u),
        move |u: f64| gauss_cubic_jet(cubic, u) + half * flat_profile_jet(u),
        8.0,
    )
}

pub fn gaussian() -> SBetaFunction {
    gauss_cubic_with_jump("gaussian", [1.0, 0.0, 0.0, 0.0], 0.0)
}

pub fn bump(name: impl Into<String>, center: f64, radius: f64) -> SBetaFunction {
    SBetaFunction::smooth(name, move |u: f64| bump_jet(center, radius, u), center.abs() + radius)
}

/// At least three linearly independent members of the test space for
/// `regime`, each verified against the regime's boundary conditions.
///
/// The free coefficients are `(c0, c2, c3, jump)`; the slope `c1 = H'(0±)`
/// is then fixed by the regime: `jump = 0` in the sub regime,
/// `c1 = alpha * jump` in the critical one, `c1 = 0` in the super one.
pub fn make_test_family(regime: Regime) -> Result<Vec<SBetaFunction>> {
    let free: [([f64; 3], f64, &str); 4] = [
        ([1.0, 0.0, 0.0], 0.0, "gaussian"),
        ([0.0, 1.0, 0.0], 0.0, "quadratic"),
        ([0.5, -0.5, 0.25], 1.0, "jump-cubic"),
        ([0.0, 0.0, 0.0], 1.0, "jump"),
    ];
    let mut out = Vec::new();
    for ([c0, c2, c3], jump, name) in free {
        let (slope, jump) = match regime {
            Regime::Sub => {
                if jump != 0.0 {
                    // The continuous slot is filled by an odd cubic instead.
                    (1.0, 0.0)
                } else {
                    (0.0, 0.0)
                }
            }
            Regime::Critical { alpha } => (alpha * jump, jump),
            Regime::Super => (0.0, jump),
        };
        let h = gauss_cubic_with_jump(format!("{regime}-{name}"), [c0, slope, c2, c3], jump);
        h.check_regime(regime)?;
        out.push(h);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(h: &SBetaFunction, u: f64) {
        let step = 1e-4;
        let j = h.jet(u);
        let d1 = (h.eval(u + step) - h.eval(u - step)) / (2.0 * step);
        let d2 = (h.eval(u + step) - 2.0 * j.value + h.eval(u - step)) / (step * step);
        let d3 = (h.jet(u + step).d2 - h.jet(u - step).d2) / (2.0 * step);
        assert!((j.d1 - d1).abs() < 1e-6, "{} d1 at {u}: {} vs {d1}", h.name(), j.d1);
        assert!(
            (j.d2 - d2).abs() < 1e-5 * j.d2.abs().max(1.0),
            "{} d2 at {u}: {} vs {d2}",
            h.name(),
            j.d2
        );
        assert!(
            (j.d3 - d3).abs() < 1e-5 * j.d3.abs().max(1.0),
            "{} d3 at {u}: {} vs {d3}",
            h.name(),
            j.d3
        );
    }

    #[test]
    fn jets_match_finite_differences() {
        let fam = make_test_family(Regime::Critical { alpha: 1.3 }).unwrap();
        for h in fam.iter().chain([bump("b", 0.5, 0.3)].iter()) {
            for &u in &[-1.7, -0.4, -0.06, 0.07, 0.3, 0.55, 1.2, 2.5] {
                fd_check(h, u);
            }
        }
    }

    #[test]
    fn nabla_is_derivative_away_from_zero() {
        let h = gaussian();
        let grad = nabla_beta(&h);
        for &u in &[-1.0, -0.3, 0.2, 0.9] {
            assert!((grad(u) + 2.0 * u * (-u * u).exp()).abs() < 1e-15);
        }
        // Second order convergence of the centered difference.
        let f = |hh: f64| ((h.eval(0.7 + hh) - h.eval(0.7 - hh)) / (2.0 * hh) - grad(0.7)).abs();
        let ratio = f(1e-2) / f(5e-3);
        assert!((ratio - 4.0).abs() < 0.1, "ratio {ratio}");
        let lap = delta_beta(&h);
        assert!((lap(0.0) + 2.0).abs() < 1e-15);
    }

    #[test]
    fn super_regime_even_functions_have_zero_slope() {
        let fam = make_test_family(Regime::Super).unwrap();
        for h in &fam {
            assert_eq!(nabla_beta(h)(0.0), 0.0);
        }
        assert!(gaussian().check_regime(Regime::Super).is_ok());
        assert!(gaussian().check_regime(Regime::Sub).is_ok());
    }

    #[test]
    fn critical_family_satisfies_robin_condition() {
        let alpha = 1.0;
        let fam = make_test_family(Regime::Critical { alpha }).unwrap();
        assert!(fam.len() >= 3);
        for h in &fam {
            let (l, r) = (h.left_limit(), h.right_limit());
            assert!((r.d1 - alpha * (r.value - l.value)).abs() <= 1e-10);
            assert!((l.d1 - alpha * (r.value - l.value)).abs() <= 1e-10);
        }
    }

    #[test]
    fn families_are_linearly_independent() {
        for regime in [Regime::Sub, Regime::Critical { alpha: 2.0 }, Regime::Super] {
            let fam = make_test_family(regime).unwrap();
            // Gram matrix on a grid must be nonsingular (check the 3x3 leading
            // minor via its determinant).
            let grid: Vec<f64> = (-400..=400).map(|k| k as f64 * 0.01).collect();
            let g =
                |a: &SBetaFunction, b: &SBetaFunction| grid.iter().map(|&u| a.eval(u) * b.eval(u)).sum::<f64>() * 0.01;
            let m: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| g(&fam[i], &fam[j])).collect()).collect();
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            assert!(det.abs() > 1e-4, "{regime}: det {det}");
        }
    }

    #[test]
    fn boundary_violations_are_reported() {
        let jumpy = gauss_cubic_with_jump("j", [0.0, 0.0, 0.0, 0.0], 1.0);
        assert!(jumpy.check_regime(Regime::Sub).is_err());
        assert!(jumpy.check_regime(Regime::Super).is_ok());
        assert!(jumpy.check_regime(Regime::Critical { alpha: 1.0 }).is_err());
        let sloped = gauss_cubic_with_jump("s", [0.0, 1.0, 0.0, 0.0], 0.0);
        assert!(sloped.check_regime(Regime::Super).is_err());
    }

    #[test]
    fn regime_from_params() {
        let p = SlowBondParams::new(10, 2.0, Beta::Finite(0.5)).unwrap();
        assert_eq!(Regime::of(&p), Regime::Sub);
        let p = SlowBondParams::new(10, 2.0, Beta::Finite(1.0)).unwrap();
        assert_eq!(Regime::of(&p), Regime::Critical { alpha: 2.0 });
        let p = SlowBondParams::new(10, 2.0, Beta::Infinite).unwrap();
        assert_eq!(Regime::of(&p), Regime::Super);
        assert!(Regime::parse("critical", None).is_err());
    }
}
