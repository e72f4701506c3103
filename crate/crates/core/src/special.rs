//! Complementary error function and its scaled form.

use std::f64::consts::PI;

pub fn erfc(x: f64) -> f64 {
    libm::erfc(x)
}

/// `exp(x^2) * erfc(x)`, finite for every finite `x >= -26`.
pub fn erfcx(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 * (x * x).exp() - erfcx(-x);
    }
    if x < 8.0 {
        return (x * x).exp() * libm::erfc(x);
    }
    // Laplace continued fraction, evaluated bottom-up:
    // erfcx(x) = 1/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...))))
    let mut tail = x;
    for k in (1..=60).rev() {
        tail = x + (k as f64 * 0.5) / tail;
    }
    1.0 / (PI.sqrt() * tail)
}
