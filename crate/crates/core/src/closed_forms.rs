//! Limiting variances of the density field, the current and a tagged
//! particle.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{usage, Result};
use crate::quadrature::integrate;
use crate::sbeta::{Regime, SBetaFunction};
use crate::special::{erfc, erfcx};

/// Static compressibility `rho (1 - rho)`.
pub fn chi(rho: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&rho) {
        return usage(format!("rho {rho} outside [0, 1]"));
    }
    Ok(rho * (1.0 - rho))
}

/// Gaussian upper tail `∫_x^∞ e^{-v^2/4t} / sqrt(4 pi t) dv = erfc(x / (2 sqrt t)) / 2`.
pub fn phi(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return usage(format!("phi needs t > 0, got {t}"));
    }
    Ok(0.5 * erfc(x / (2.0 * t.sqrt())))
}

fn check_args(rho: f64, u: f64, t: f64) -> Result<()> {
    chi(rho)?;
    if !(t > 0.0) || !t.is_finite() {
        return usage(format!("variance needs t > 0, got {t}"));
    }
    if !u.is_finite() {
        return usage(format!("u must be finite, got {u}"));
    }
    Ok(())
}

/// `Φ_{2t}(2u + 4αt) e^{4αu + 4α²t}` without forming the exponential.
///
/// With `z = u/√t + 2α√t` the exponent equals `z² - u²/t`, so the product
/// is `½ erfcx(z) e^{-u²/t}`, which stays bounded as `α → ∞`.
pub fn robin_tail_product(u: f64, t: f64, alpha: f64) -> f64 {
    let st = t.sqrt();
    let z = u / st + 2.0 * alpha * st;
    0.5 * erfcx(z) * (-u * u / t).exp()
}

/// The same product formed literally; overflows for moderate `α`.
pub fn robin_tail_product_naive(u: f64, t: f64, alpha: f64) -> f64 {
    let tail = 0.5 * erfc((2.0 * u + 4.0 * alpha * t) / (2.0 * t.sqrt()));
    tail * (4.0 * alpha * u + 4.0 * alpha * alpha * t).exp()
}

/// Limiting `E[J_u(t)^2]` of the rescaled current through the bond at `u`.
///
/// The formulas are written for `u >= 0`; the model is symmetric under
/// reflection about the slow bond, so `u < 0` is evaluated at `|u|`.
pub fn current_variance(regime: Regime, rho: f64, u: f64, t: f64) -> Result<f64> {
    check_args(rho, u, t)?;
    let c = chi(rho)?;
    let a = u.abs();
    let root = (t / PI).sqrt();
    let inner = match regime {
        Regime::Sub => root,
        Regime::Critical { alpha } => {
            Regime::critical(alpha)?;
            root + (robin_tail_product(a, t, alpha) - phi(t, 2.0 * a)?) / (2.0 * alpha)
        }
        Regime::Super => root * (1.0 - (-a * a / t).exp()) + 2.0 * a * phi(t, 2.0 * a)?,
    };
    Ok(2.0 * c * inner)
}

/// Which expression to use for the tagged-particle variance at `beta = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TaggedForm {
    /// `current_variance / rho^2`.
    #[default]
    InLaw,
    /// The alternative critical expression without the `- Φ_{2t}(2u)` term.
    PrintedCritical,
}

/// Limiting `E[X_u(t)^2]` for a tagged particle started at `floor(u n)`.
pub fn tagged_variance(regime: Regime, rho: f64, u: f64, t: f64) -> Result<f64> {
    tagged_variance_with(regime, rho, u, t, TaggedForm::InLaw)
}

pub fn tagged_variance_with(regime: Regime, rho: f64, u: f64, t: f64, form: TaggedForm) -> Result<f64> {
    if !(rho > 0.0 && rho < 1.0) {
        return usage(format!("tagged particle variance needs rho in (0, 1), got {rho}"));
    }
    let scale = 1.0 / (rho * rho);
    match (form, regime) {
        (TaggedForm::PrintedCritical, Regime::Critical { alpha }) => {
            check_args(rho, u, t)?;
            Regime::critical(alpha)?;
            let a = u.abs();
            let inner = (t / PI).sqrt() + robin_tail_product(a, t, alpha) / (2.0 * alpha);
            Ok(2.0 * chi(rho)? * scale * inner)
        }
        _ => Ok(current_variance(regime, rho, u, t)? * scale),
    }
}

/// `∫ G H` over the real line, split at the slow bond.
pub fn l2_inner(g: &SBetaFunction, h: &SBetaFunction) -> f64 {
    let w = g.window().min(h.window()).max(1e-3);
    let f = |u: f64| g.eval(u) * h.eval(u);
    integrate(f, -w, 0.0, 1e-14, 1e-12) + integrate(f, 0.0, w, 1e-14, 1e-12)
}

/// `χ(ρ) ∫ G H`: covariance of the limiting initial field.
pub fn y0_covariance(g: &SBetaFunction, h: &SBetaFunction, rho: f64) -> Result<f64> {
    Ok(chi(rho)? * l2_inner(g, h))
}

/// `χ(ρ) ‖H‖₂²`.
pub fn y0_variance(h: &SBetaFunction, rho: f64) -> Result<f64> {
    y0_covariance(h, h, rho)
}

/// `‖H‖₂² + H(0)² 1{critical}`.
pub fn norm_2beta_sq(h: &SBetaFunction, regime: Regime) -> f64 {
    let base = l2_inner(h, h);
    match regime {
        Regime::Critical { .. } => base + h.right_limit().value.powi(2),
        _ => base,
    }
}

/// `‖∇_β H‖²_{2,β} = ‖H'‖₂² + H'(0+)² 1{critical}`.
pub fn gradient_norm_2beta_sq(h: &SBetaFunction, regime: Regime) -> f64 {
    let w = h.window();
    let f = |u: f64| h.jet(u).d1.powi(2);
    let base = integrate(f, -w, 0.0, 1e-14, 1e-12) + integrate(f, 0.0, w, 1e-14, 1e-12);
    match regime {
        Regime::Critical { .. } => base + h.right_limit().d1.powi(2),
        _ => base,
    }
}

/// One row of an emitted variance table.
#[derive(Debug, Clone, Serialize)]
pub struct VarianceRow {
    pub regime: String,
    pub alpha: Option<f64>,
    pub rho: f64,
    pub u: f64,
    pub t: f64,
    pub variance: f64,
}

pub fn variance_table(regime: Regime, rho: f64, us: &[f64], ts: &[f64]) -> Result<Vec<VarianceRow>> {
    let mut rows = Vec::new();
    for &t in ts {
        for &u in us {
            rows.push(VarianceRow {
                regime: regime.name().to_string(),
                alpha: regime.alpha(),
                rho,
                u,
                t,
                variance: current_variance(regime, rho, u, t)?,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sbeta::{gauss_cubic_with_jump, gaussian};
    use proptest::prelude::*;

    /// Direct quadrature of the Gaussian tail integral, independent of erfc.
    fn phi_quadrature(t: f64, x: f64) -> f64 {
        let density = |v: f64| (-v * v / (4.0 * t)).exp() / (4.0 * PI * t).sqrt();
        let upper = x.max(0.0) + 60.0 * t.sqrt();
        integrate(density, x, upper, 1e-15, 1e-15)
    }

    #[test]
    fn chi_values() {
        assert_eq!(chi(0.0).unwrap(), 0.0);
        assert_eq!(chi(0.5).unwrap(), 0.25);
        assert!((chi(0.3).unwrap() - 0.21).abs() < 1e-15);
        assert!(chi(1.1).is_err());
    }

    #[test]
    fn phi_values() {
        for t in [0.1, 1.0, 10.0] {
            assert_eq!(phi(t, 0.0).unwrap(), 0.5);
            for x in [0.3, 1.0, 4.0] {
                assert!((phi(t, x).unwrap() + phi(t, -x).unwrap() - 1.0).abs() < 1e-15);
            }
        }
        // Quadrature oracle of the defining integral at t = 1, x = 2.
        let oracle = phi_quadrature(1.0, 2.0);
        assert!((oracle - 0.0786496).abs() < 5e-8, "oracle {oracle}");
        assert!((phi(1.0, 2.0).unwrap() - oracle).abs() < 1e-12);
        assert!(phi(0.0, 1.0).is_err());
    }

    #[test]
    fn phi_matches_quadrature_on_grid() {
        for t in [0.1, 1.0, 10.0] {
            for x in -5..=5 {
                let x = x as f64;
                assert!((phi(t, x).unwrap() - phi_quadrature(t, x)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn sub_regime_examples() {
        let v = current_variance(Regime::Sub, 0.5, 0.7, PI).unwrap();
        assert!((v - 0.5).abs() < 1e-15);
        assert!((tagged_variance(Regime::Sub, 0.5, 0.0, PI).unwrap() - 2.0).abs() < 1e-14);
        let v = current_variance(Regime::Sub, 0.5, 0.0, 0.5).unwrap();
        assert!((v - 0.199471140200716).abs() < 1e-12);
    }

    #[test]
    fn super_regime_vanishes_at_the_bond() {
        for t in [0.01, 0.5, 3.0] {
            assert_eq!(current_variance(Regime::Super, 0.3, 0.0, t).unwrap(), 0.0);
            assert_eq!(tagged_variance(Regime::Super, 0.3, 0.0, t).unwrap(), 0.0);
        }
    }

    #[test]
    fn corollary_limits() {
        for u in [0.0, 0.3] {
            let sub = current_variance(Regime::Sub, 0.4, u, 0.5).unwrap();
            let sup = current_variance(Regime::Super, 0.4, u, 0.5).unwrap();
            let big = current_variance(Regime::Critical { alpha: 1e4 }, 0.4, u, 0.5).unwrap();
            let small = current_variance(Regime::Critical { alpha: 1e-4 }, 0.4, u, 0.5).unwrap();
            assert!((big - sub).abs() <= 1e-3, "u={u}: {big} vs {sub}");
            assert!((small - sup).abs() <= 1e-3, "u={u}: {small} vs {sup}");
        }
    }

    #[test]
    fn safe_product_matches_naive_where_naive_works() {
        for (u, t, a) in [(0.0, 0.5, 0.1), (0.3, 0.5, 1.0), (0.2, 1.0, 3.0), (1.0, 0.1, 2.0)] {
            let safe = robin_tail_product(u, t, a);
            let naive = robin_tail_product_naive(u, t, a);
            assert!(
                (safe - naive).abs() <= 1e-12 * naive.abs().max(1.0),
                "{safe} vs {naive}"
            );
        }
        assert!(!robin_tail_product_naive(0.3, 0.5, 1e3).is_finite() || robin_tail_product_naive(0.3, 0.5, 1e3) == 0.0);
        assert!(robin_tail_product(0.3, 0.5, 1e3).is_finite());
    }

    #[test]
    fn printed_critical_form_differs_by_one_term() {
        let r = Regime::Critical { alpha: 1.0 };
        let (rho, u, t) = (0.5, 0.2, 0.5);
        let in_law = tagged_variance(r, rho, u, t).unwrap();
        let printed = tagged_variance_with(r, rho, u, t, TaggedForm::PrintedCritical).unwrap();
        let term = 2.0 * chi(rho).unwrap() / (rho * rho) * phi(t, 2.0 * u).unwrap() / 2.0;
        assert!((printed - in_law - term).abs() < 1e-13);
        // Outside the critical regime the two forms agree.
        let a = tagged_variance_with(Regime::Sub, rho, u, t, TaggedForm::PrintedCritical).unwrap();
        assert_eq!(a, tagged_variance(Regime::Sub, rho, u, t).unwrap());
    }

    #[test]
    fn tagged_needs_interior_density() {
        assert!(tagged_variance(Regime::Sub, 0.0, 0.0, 1.0).is_err());
        assert!(tagged_variance(Regime::Sub, 1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn y0_variance_examples() {
        let g = gaussian();
        let v = y0_variance(&g, 0.5).unwrap();
        assert!((v - 0.25 * (PI / 2.0).sqrt()).abs() < 1e-12);
        assert!((v - 0.31333).abs() < 1e-5);
        let zero = gauss_cubic_with_jump("zero", [0.0; 4], 0.0);
        assert_eq!(y0_variance(&zero, 0.5).unwrap(), 0.0);
        assert_eq!(norm_2beta_sq(&zero, Regime::Critical { alpha: 1.0 }), 0.0);
        assert!((y0_covariance(&g, &g, 0.3).unwrap() - y0_variance(&g, 0.3).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn norm_2beta_indicator() {
        let g = gaussian();
        let l2 = l2_inner(&g, &g);
        assert_eq!(norm_2beta_sq(&g, Regime::Sub), l2);
        assert!((norm_2beta_sq(&g, Regime::Critical { alpha: 1.0 }) - (l2 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn bilinear_form_with_disjoint_supports_vanishes() {
        let a = crate::sbeta::bump("a", -1.0, 0.5);
        let b = crate::sbeta::bump("b", 1.0, 0.5);
        assert_eq!(y0_covariance(&a, &b, 0.5).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn variances_nonnegative(rho in 0.0f64..=1.0, u in -3.0f64..3.0, t in 0.01f64..5.0,
                                 log_alpha in -5.0f64..5.0) {
            let alpha = 10f64.powf(log_alpha);
            for r in [Regime::Sub, Regime::Critical { alpha }, Regime::Super] {
                let v = current_variance(r, rho, u, t).unwrap();
                prop_assert!(v >= -1e-15, "{r} {v}");
            }
        }

        #[test]
        fn tagged_is_current_over_rho_squared(rho in 0.01f64..0.99, u in 0.0f64..2.0, t in 0.01f64..5.0) {
            for r in [Regime::Sub, Regime::Critical { alpha: 0.7 }, Regime::Super] {
                let c = current_variance(r, rho, u, t).unwrap();
                let x = tagged_variance(r, rho, u, t).unwrap();
                prop_assert!((x * rho * rho - c).abs() <= 1e-14 * c.max(1.0));
            }
        }

        #[test]
        fn critical_interpolates(u in 0.0f64..1.0, t in 0.05f64..2.0) {
            let sub = current_variance(Regime::Sub, 0.5, u, t).unwrap();
            let sup = current_variance(Regime::Super, 0.5, u, t).unwrap();
            let hi = current_variance(Regime::Critical { alpha: 1e6 }, 0.5, u, t).unwrap();
            let lo = current_variance(Regime::Critical { alpha: 1e-6 }, 0.5, u, t).unwrap();
            prop_assert!((hi - sub).abs() < 1e-5);
            prop_assert!((lo - sup).abs() < 1e-5);
        }

        #[test]
        fn continuous_in_u(u in 0.0f64..2.0, t in 0.05f64..2.0) {
            for r in [Regime::Sub, Regime::Critical { alpha: 1.0 }, Regime::Super] {
                let a = current_variance(r, 0.5, u, t).unwrap();
                let b = current_variance(r, 0.5, u + 1e-7, t).unwrap();
                prop_assert!((a - b).abs() < 1e-5);
            }
        }

        #[test]
        fn sub_is_u_independent(u in -2.0f64..2.0, t in 0.05f64..2.0) {
            let a = current_variance(Regime::Sub, 0.3, u, t).unwrap();
            let b = current_variance(Regime::Sub, 0.3, 0.0, t).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
