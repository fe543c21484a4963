//! Small dense linear-algebra helpers shared by the model and inference code.

use nalgebra::{Cholesky, DMatrix, DVector};

pub const LOG_2PI: f64 = 1.8378770664093453;

/// Returns `(M + M') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky factorization after symmetrizing; `None` if not positive definite.
pub fn spd_cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, nalgebra::Dyn>> {
    Cholesky::new(symmetrize(m))
}

/// log-determinant of a symmetric positive definite matrix.
pub fn spd_logdet(m: &DMatrix<f64>) -> Option<f64> {
    let chol = spd_cholesky(m)?;
    let mut acc = 0.0;
    for i in 0..m.nrows() {
        acc += chol.l()[(i, i)].ln();
    }
    Some(2.0 * acc)
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let chol = spd_cholesky(m)?;
    Some(symmetrize(&chol.inverse()))
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    symmetrize(m)
        .symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

/// Symmetrizes and clamps eigenvalues from below at `floor`.
pub fn eigen_floor(m: &DMatrix<f64>, floor: f64) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let vals = eig.eigenvalues.map(|v| v.max(floor));
    let mut scaled = eig.eigenvectors.clone();
    for j in 0..scaled.ncols() {
        let s = vals[j];
        for i in 0..scaled.nrows() {
            scaled[(i, j)] *= s;
        }
    }
    symmetrize(&(scaled * eig.eigenvectors.transpose()))
}

/// log N(x | mean, cov) for a symmetric positive definite covariance.
pub fn log_gaussian(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Option<f64> {
    let chol = spd_cholesky(cov)?;
    let d = x.len() as f64;
    let mut logdet = 0.0;
    for i in 0..cov.nrows() {
        logdet += chol.l()[(i, i)].ln();
    }
    let diff = x - mean;
    let solved = chol.solve(&diff);
    let quad = diff.dot(&solved);
    Some(-0.5 * (d * LOG_2PI + quad) - logdet)
}

/// Streaming log-sum-exp accumulator.
#[derive(Debug, Clone, Copy)]
pub struct LogSumExp {
    max: f64,
    sum: f64,
}

impl LogSumExp {
    pub fn new() -> Self {
        LogSumExp {
            max: f64::NEG_INFINITY,
            sum: 0.0,
        }
    }

    pub fn add(&mut self, v: f64) {
        if v == f64::NEG_INFINITY {
            return;
        }
        if v <= self.max {
            self.sum += (v - self.max).exp();
        } else {
            self.sum = self.sum * (self.max - v).exp() + 1.0;
            self.max = v;
        }
    }

    pub fn value(&self) -> f64 {
        if self.max == f64::NEG_INFINITY {
            f64::NEG_INFINITY
        } else {
            self.max + self.sum.ln()
        }
    }
}

impl Default for LogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

pub fn log_sum_exp(vals: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = LogSumExp::new();
    for v in vals {
        acc.add(v);
    }
    acc.value()
}

/// `0 * log 0 = 0` convention for entropy and expected-log sums.
pub fn weighted_log(weight: f64, log_term: f64) -> f64 {
    if weight == 0.0 {
        0.0
    } else {
        weight * log_term
    }
}
