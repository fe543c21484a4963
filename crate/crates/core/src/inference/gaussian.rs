//! Variational Gaussian chain: conditional parameterization and the forward
//! moment recursion.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{spd_logdet, LOG_2PI};

/// Conditional parameterization of the variational Gaussian chain:
/// `Q(x_0) = N(mu_init, q_init)` and
/// `Q(x_t | x_{t-1}) = N(lin[t] x_{t-1} + offset[t], cov[t])` for t = 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianChainParams {
    pub mu_init: DVector<f64>,
    pub q_init: DMatrix<f64>,
    pub lin: Vec<DMatrix<f64>>,
    pub offset: Vec<DVector<f64>>,
    pub cov: Vec<DMatrix<f64>>,
}

impl GaussianChainParams {
    pub fn dim(&self) -> usize {
        self.mu_init.len()
    }

    pub fn horizon(&self) -> usize {
        self.lin.len()
    }

    /// 1-based access mirroring the t = 1..=T convention.
    pub fn lin_at(&self, t: usize) -> &DMatrix<f64> {
        &self.lin[t - 1]
    }

    pub fn offset_at(&self, t: usize) -> &DVector<f64> {
        &self.offset[t - 1]
    }

    pub fn cov_at(&self, t: usize) -> &DMatrix<f64> {
        &self.cov[t - 1]
    }
}

/// First and second moments of the Gaussian chain plus its entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousChainStats {
    /// mean[t] = <x_t>
    pub mean: Vec<DVector<f64>>,
    /// second[t] = <x_t x_t'>
    pub second: Vec<DMatrix<f64>>,
    /// cross[t-1] = <x_t x_{t-1}'> for t = 1..=T.
    pub cross: Vec<DMatrix<f64>>,
    pub entropy: f64,
}

impl ContinuousChainStats {
    pub fn cross_at(&self, t: usize) -> &DMatrix<f64> {
        &self.cross[t - 1]
    }

    /// Marginal covariance at t.
    pub fn covariance(&self, t: usize) -> DMatrix<f64> {
        &self.second[t] - &self.mean[t] * self.mean[t].transpose()
    }
}

/// Forward recursion for the chain moments. The covariance recursion is
/// `cov[t] = lin[t] cov[t-1] lin[t]' + Q[t]`; raw second moments and cross
/// moments add the mean outer products back in.
pub fn continuous_moments(params: &GaussianChainParams) -> ContinuousChainStats {
    let horizon = params.horizon();
    let mut mean = Vec::with_capacity(horizon + 1);
    let mut cov = Vec::with_capacity(horizon + 1);
    mean.push(params.mu_init.clone());
    cov.push(params.q_init.clone());
    for t in 1..=horizon {
        let m = params.lin_at(t) * &mean[t - 1] + params.offset_at(t);
        let c = params.lin_at(t) * &cov[t - 1] * params.lin_at(t).transpose() + params.cov_at(t);
        mean.push(m);
        cov.push(c);
    }

    let second: Vec<DMatrix<f64>> = (0..=horizon)
        .map(|t| &cov[t] + &mean[t] * mean[t].transpose())
        .collect();
    let cross: Vec<DMatrix<f64>> = (1..=horizon)
        .map(|t| {
            params.lin_at(t) * &second[t - 1] + params.offset_at(t) * mean[t - 1].transpose()
        })
        .collect();

    // H = 0.5 log|2 pi e q_init| + sum_t 0.5 log|2 pi e cov[t]|
    let d = params.dim() as f64;
    let gauss_ent = |m: &DMatrix<f64>| {
        0.5 * (d * (LOG_2PI + 1.0) + spd_logdet(m).unwrap_or(f64::NEG_INFINITY))
    };
    let entropy =
        gauss_ent(&params.q_init) + (1..=horizon).map(|t| gauss_ent(params.cov_at(t))).sum::<f64>();

    ContinuousChainStats {
        mean,
        second,
        cross,
        entropy,
    }
}
