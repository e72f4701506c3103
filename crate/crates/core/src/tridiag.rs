//! Pre-factored tridiagonal solves, with a Sherman–Morrison correction for
//! systems that also carry the two corner entries `A[0][N-1]` and `A[N-1][0]`.

use crate::error::{usage, Result};

/// Thomas algorithm with the forward sweep done once.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    sub: Vec<f64>,
    /// Modified super-diagonal `c'_i`.
    sup: Vec<f64>,
    /// Pivots `b_i - a_i c'_{i-1}`.
    pivot: Vec<f64>,
}

impl Tridiagonal {
    /// `sub[0]` and `sup[N-1]` are ignored.
    pub fn new(sub: &[f64], diag: &[f64], sup: &[f64]) -> Result<Self> {
        let n = diag.len();
        if n == 0 || sub.len() != n || sup.len() != n {
            return usage("tridiagonal bands must have equal, nonzero length");
        }
        let mut cp = vec![0.0; n];
        let mut pivot = vec![0.0; n];
        pivot[0] = diag[0];
        for i in 0..n {
            if i > 0 {
                pivot[i] = diag[i] - sub[i] * cp[i - 1];
            }
            if pivot[i] == 0.0 || !pivot[i].is_finite() {
                return usage(format!("zero pivot at row {i}"));
            }
            if i + 1 < n {
                cp[i] = sup[i] / pivot[i];
            }
        }
        Ok(Self {
            sub: sub.to_vec(),
            sup: cp,
            pivot,
        })
    }

    pub fn len(&self) -> usize {
        self.pivot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pivot.is_empty()
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = self.len();
        x[0] /= self.pivot[0];
        for i in 1..n {
            x[i] = (x[i] - self.sub[i] * x[i - 1]) / self.pivot[i];
        }
        for i in (0..n - 1).rev() {
            x[i] -= self.sup[i] * x[i + 1];
        }
    }
}

/// Tridiagonal plus corners, solved as a rank-one update of a tridiagonal
/// system.
#[derive(Debug, Clone)]
pub struct CyclicTridiagonal {
    inner: Tridiagonal,
    gamma: f64,
    top_right: f64,
    z: Vec<f64>,
    denom: f64,
}

impl CyclicTridiagonal {
    pub fn new(sub: &[f64], diag: &[f64], sup: &[f64], top_right: f64, bottom_left: f64) -> Result<Self> {
        let n = diag.len();
        if n < 3 {
            return usage("cyclic system needs at least 3 rows");
        }
        let gamma = -diag[0];
        let mut d = diag.to_vec();
        d[0] -= gamma;
        d[n - 1] -= bottom_left * top_right / gamma;
        let inner = Tridiagonal::new(sub, &d, sup)?;
        let mut z = vec![0.0; n];
        z[0] = gamma;
        z[n - 1] = bottom_left;
        inner.solve_in_place(&mut z);
        let denom = 1.0 + z[0] + top_right * z[n - 1] / gamma;
        if denom == 0.0 || !denom.is_finite() {
            return usage("singular cyclic system");
        }
        Ok(Self {
            inner,
            gamma,
            top_right,
            z,
            denom,
        })
    }

    pub fn solve_in_place(&self, x: &mut [f64]) {
        let n = x.len();
        self.inner.solve_in_place(x);
        let fact = (x[0] + self.top_right * x[n - 1] / self.gamma) / self.denom;
        for (xi, zi) in x.iter_mut().zip(&self.z) {
            *xi -= fact * zi;
        }
    }
}
