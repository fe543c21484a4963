//! Exact reference computations on small instances: Kalman-filter
//! log-likelihood, exhaustive discrete-path enumeration with per-path
//! time-varying Kalman evaluation, and naive joint-Gaussian chain moments.
//!
//! These are deliberately slow, independent routes used to validate the
//! mean-field approximation; they are shipped so the CLI can expose them on
//! tiny models.

use nalgebra::{DMatrix, DVector};

use crate::error::{DstError, Result};
use crate::inference::{ContinuousChainStats, GaussianChainParams};
use crate::linalg::{log_gaussian, spd_cholesky, symmetrize, LogSumExp, LOG_2PI};
use crate::model::{LeafParams, Model, NodeParams, ObservationSet};
use crate::topology::NodeId;

/// Guards against exponential-cost oracle invocations.
#[derive(Debug, Clone, Copy)]
pub struct TinyLimits {
    pub max_total_discrete_paths: u128,
    pub max_joint_gaussian_dim: usize,
}

impl Default for TinyLimits {
    fn default() -> Self {
        TinyLimits {
            max_total_discrete_paths: 100_000,
            max_joint_gaussian_dim: 64,
        }
    }
}

/// Forward-filter log-likelihood of one leaf along a fixed switch path.
/// Masked steps are prediction-only.
fn kalman_path_loglik(
    p: &LeafParams,
    path: &[usize],
    y: &[DVector<f64>],
    mask: &[bool],
) -> Result<f64> {
    let d = p.init_mean[0].len();
    let mut loglik = 0.0;
    let mut mean = DVector::zeros(d);
    let mut cov = DMatrix::zeros(d, d);
    for t in 0..y.len() {
        let j = path[t];
        if t == 0 {
            mean = p.init_mean[j].clone();
            cov = p.init_cov[j].clone();
        } else {
            mean = &p.dynamics[j] * mean;
            cov = symmetrize(&(&p.dynamics[j] * cov * p.dynamics[j].transpose() + &p.dynamics_cov[j]));
        }
        if mask[t] {
            let innovation_cov =
                symmetrize(&(&p.emission * &cov * p.emission.transpose() + &p.emission_cov));
            let predicted = &p.emission * &mean;
            loglik += log_gaussian(&y[t], &predicted, &innovation_cov).ok_or(
                DstError::NotPositiveDefinite {
                    path: format!("innovation covariance at t={}", t),
                },
            )?;
            let chol = spd_cholesky(&innovation_cov).ok_or(DstError::NotPositiveDefinite {
                path: format!("innovation covariance at t={}", t),
            })?;
            let gain = &cov * p.emission.transpose() * chol.inverse();
            mean += &gain * (&y[t] - predicted);
            cov = symmetrize(&(&cov - &gain * &p.emission * &cov));
        }
    }
    Ok(loglik)
}

/// Exact marginal log-likelihood of a single-switch-state leaf: a plain
/// Kalman filter. Returns 0.0 when every step is masked (no evidence).
pub fn kalman_loglik(p: &LeafParams, y: &[DVector<f64>], mask: &[bool]) -> Result<f64> {
    assert_eq!(p.init_mean.len(), 1, "kalman_loglik requires K = 1");
    let path = vec![0usize; y.len()];
    kalman_path_loglik(p, &path, y, mask)
}

/// Exact log P(Y) of a full DST by enumerating every joint discrete path
/// over all chains. Each path's continuous marginal is a time-varying Kalman
/// filter; contributions are combined with a streaming log-sum-exp.
pub fn exact_loglik_enumerate(
    model: &Model,
    obs: &ObservationSet,
    limits: &TinyLimits,
) -> Result<f64> {
    let horizon = obs.horizon();
    let n = horizon + 1;
    let order = model.topology.dfs_order();

    let mut total_paths: u128 = 1;
    for &id in &order {
        let k = model.topology.node(id).num_switch_states as u128;
        for _ in 0..n {
            total_paths = total_paths.saturating_mul(k);
            if total_paths > limits.max_total_discrete_paths {
                return Err(DstError::OracleLimit {
                    what: format!(
                        "joint discrete path count exceeds {}",
                        limits.max_total_discrete_paths
                    ),
                });
            }
        }
    }

    // Mixed-radix counter over (chain, time) digits; chain-major layout.
    let radices: Vec<usize> = order
        .iter()
        .flat_map(|&id| vec![model.topology.node(id).num_switch_states; n])
        .collect();
    let mut digits = vec![0usize; radices.len()];
    fn path_of(digits: &[usize], chain_idx: usize, n: usize) -> &[usize] {
        &digits[chain_idx * n..(chain_idx + 1) * n]
    }

    let mut acc = LogSumExp::new();
    loop {
        let mut log_p = 0.0;
        for (ci, &id) in order.iter().enumerate() {
            let path = path_of(&digits, ci, n);
            let parent_path = model.topology.parent(id).map(|p| {
                let pi = order.iter().position(|&x| x == p).expect("parent in order");
                path_of(&digits, pi, n)
            });
            let pstate = |t: usize| parent_path.map(|pp| pp[t]).unwrap_or(0);
            let (init, trans) = match &model.params[id.0] {
                NodeParams::Aggregator(p) => (&p.init, &p.trans),
                NodeParams::Leaf(p) => (&p.switch_init, &p.switch_trans),
            };
            log_p += init[(path[0], pstate(0))].ln();
            for t in 1..n {
                log_p += trans[pstate(t)][(path[t], path[t - 1])].ln();
            }
        }
        if log_p > f64::NEG_INFINITY {
            for (ci, &id) in order.iter().enumerate() {
                if let NodeParams::Leaf(p) = &model.params[id.0] {
                    log_p += kalman_path_loglik(
                        p,
                        path_of(&digits, ci, n),
                        &obs.y[&id],
                        &obs.observed[&id],
                    )?;
                }
            }
            acc.add(log_p);
        }

        // increment
        let mut pos = 0;
        loop {
            if pos == digits.len() {
                return Ok(acc.value());
            }
            digits[pos] += 1;
            if digits[pos] < radices[pos] {
                break;
            }
            digits[pos] = 0;
            pos += 1;
        }
    }
}

/// Chain moments via the explicit joint Gaussian over (x_0..x_T): assembles
/// the block-tridiagonal joint precision from the conditional densities,
/// inverts it, and marginalizes. Independent of the forward moment recursion.
pub fn gaussian_chain_moments_naive(
    params: &GaussianChainParams,
    limits: &TinyLimits,
) -> Result<ContinuousChainStats> {
    let d = params.dim();
    let horizon = params.horizon();
    let dim = (horizon + 1) * d;
    if dim > limits.max_joint_gaussian_dim {
        return Err(DstError::OracleLimit {
            what: format!("joint Gaussian dimension {} exceeds {}", dim, limits.max_joint_gaussian_dim),
        });
    }

    let mut precision = DMatrix::zeros(dim, dim);
    let mut shift = DVector::zeros(dim);
    let block = |t: usize| t * d;

    let q0_inv = spd_cholesky(&params.q_init)
        .ok_or(DstError::NotPositiveDefinite { path: "q_init".into() })?
        .inverse();
    precision
        .view_mut((block(0), block(0)), (d, d))
        .copy_from(&q0_inv);
    shift.rows_mut(block(0), d).copy_from(&(&q0_inv * &params.mu_init));

    for t in 1..=horizon {
        let q_inv = spd_cholesky(params.cov_at(t))
            .ok_or(DstError::NotPositiveDefinite {
                path: format!("cov[{}]", t),
            })?
            .inverse();
        let a = params.lin_at(t);
        let b = params.offset_at(t);
        let cross = &q_inv * a;
        add_block(&mut precision, block(t), block(t), &q_inv);
        add_block(&mut precision, block(t - 1), block(t - 1), &(a.transpose() * &cross));
        sub_block(&mut precision, block(t), block(t - 1), &cross);
        sub_block(&mut precision, block(t - 1), block(t), &cross.transpose());
        let qb = &q_inv * b;
        for i in 0..d {
            shift[block(t) + i] += qb[i];
        }
        let atqb = a.transpose() * &qb;
        for i in 0..d {
            shift[block(t - 1) + i] -= atqb[i];
        }
    }

    let chol = spd_cholesky(&precision).ok_or(DstError::NotPositiveDefinite {
        path: "joint precision".into(),
    })?;
    let sigma = chol.inverse();
    let joint_mean = chol.solve(&shift);

    let mean: Vec<DVector<f64>> = (0..=horizon)
        .map(|t| joint_mean.rows(block(t), d).into_owned())
        .collect();
    let second: Vec<DMatrix<f64>> = (0..=horizon)
        .map(|t| {
            sigma.view((block(t), block(t)), (d, d)).into_owned() + &mean[t] * mean[t].transpose()
        })
        .collect();
    let cross: Vec<DMatrix<f64>> = (1..=horizon)
        .map(|t| {
            sigma.view((block(t), block(t - 1)), (d, d)).into_owned()
                + &mean[t] * mean[t - 1].transpose()
        })
        .collect();

    // log|Sigma| = -log|J|
    let mut logdet_j = 0.0;
    for i in 0..dim {
        logdet_j += chol.l()[(i, i)].ln();
    }
    let entropy = 0.5 * (dim as f64 * (LOG_2PI + 1.0)) - logdet_j;

    Ok(ContinuousChainStats {
        mean,
        second,
        cross,
        entropy,
    })
}

fn add_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &DMatrix<f64>) {
    let mut view = m.view_mut((r, c), (b.nrows(), b.ncols()));
    view += b;
}

fn sub_block(m: &mut DMatrix<f64>, r: usize, c: usize, b: &DMatrix<f64>) {
    let mut view = m.view_mut((r, c), (b.nrows(), b.ncols()));
    view -= b;
}

/// Relabels the switch states of a node's tables and per-state parameters
/// by `perm` (new index j holds old index perm[j]). Used by permutation
/// invariance tests.
pub fn permute_node_states(model: &mut Model, id: NodeId, perm: &[usize]) {
    let k = perm.len();
    let topo = model.topology.clone();
    let permute_init = |m: &DMatrix<f64>| DMatrix::from_fn(k, m.ncols(), |j, l| m[(perm[j], l)]);
    let permute_trans =
        |m: &DMatrix<f64>| DMatrix::from_fn(k, k, |j, kprev| m[(perm[j], perm[kprev])]);
    match &mut model.params[id.0] {
        NodeParams::Aggregator(p) => {
            p.init = permute_init(&p.init);
            p.trans = p.trans.iter().map(permute_trans).collect();
        }
        NodeParams::Leaf(p) => {
            p.switch_init = permute_init(&p.switch_init);
            p.switch_trans = p.switch_trans.iter().map(permute_trans).collect();
            let reorder = |v: &mut Vec<DVector<f64>>| {
                let old: Vec<_> = std::mem::take(v);
                *v = perm.iter().map(|&j| old[j].clone()).collect();
            };
            reorder(&mut p.init_mean);
            let reorder_m = |v: &mut Vec<DMatrix<f64>>| {
                let old: Vec<_> = std::mem::take(v);
                *v = perm.iter().map(|&j| old[j].clone()).collect();
            };
            reorder_m(&mut p.init_cov);
            reorder_m(&mut p.dynamics);
            reorder_m(&mut p.dynamics_cov);
        }
    }
    // Parent-state slices of each child's tables must be permuted in step.
    for &c in topo.children(id) {
        match &mut model.params[c.0] {
            NodeParams::Aggregator(p) => {
                p.init = DMatrix::from_fn(p.init.nrows(), k, |j, l| p.init[(j, perm[l])]);
                let old = std::mem::take(&mut p.trans);
                p.trans = perm.iter().map(|&l| old[l].clone()).collect();
            }
            NodeParams::Leaf(p) => {
                p.switch_init =
                    DMatrix::from_fn(p.switch_init.nrows(), k, |j, l| p.switch_init[(j, perm[l])]);
                let old = std::mem::take(&mut p.switch_trans);
                p.switch_trans = perm.iter().map(|&l| old[l].clone()).collect();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{random_tiny_dst, single_leaf_model};
    use std::collections::BTreeMap;

    fn scalar_obs(leaf: NodeId, values: &[f64]) -> ObservationSet {
        let mut y = BTreeMap::new();
        y.insert(leaf, values.iter().map(|&v| DVector::from_vec(vec![v])).collect());
        ObservationSet::fully_observed(y)
    }

    #[test]
    fn kalman_t0_analytic() {
        let model = single_leaf_model(1, 1, 1);
        let leaf = model.topology.leaf_ids()[0];
        let p = model.leaf_params(leaf);
        let ll = kalman_loglik(p, &[DVector::from_vec(vec![0.0])], &[true]).unwrap();
        // log N(0 | 0, q0 + R) = log N(0 | 0, 2)
        let analytic = -0.5 * (LOG_2PI + 2.0f64.ln());
        assert!((ll - analytic).abs() < 1e-9, "{} vs {}", ll, analytic);
    }

    #[test]
    fn kalman_t1_zero_dynamics_factorizes() {
        let mut model = single_leaf_model(1, 1, 1);
        model.leaf_params_mut(model.topology.leaf_ids()[0]).dynamics[0] =
            DMatrix::from_vec(1, 1, vec![0.0]);
        let leaf = model.topology.leaf_ids()[0];
        let p = model.leaf_params(leaf);
        let y = [DVector::from_vec(vec![0.0]), DVector::from_vec(vec![0.0])];
        let ll = kalman_loglik(p, &y, &[true, true]).unwrap();
        let analytic = 2.0 * (-0.5 * (LOG_2PI + 2.0f64.ln()));
        assert!((ll - analytic).abs() < 1e-9);
    }

    #[test]
    fn all_masked_gives_zero() {
        let model = single_leaf_model(1, 1, 1);
        let leaf = model.topology.leaf_ids()[0];
        let p = model.leaf_params(leaf);
        let y = [DVector::from_vec(vec![3.0]), DVector::from_vec(vec![-1.0])];
        assert_eq!(kalman_loglik(p, &y, &[false, false]).unwrap(), 0.0);
    }

    #[test]
    fn enumeration_equals_kalman_on_single_path_models() {
        for seed in 0..5 {
            let model = crate::testutil::random_single_leaf_kalman_model(seed, 1, 1);
            let (_, obs) = model.sample_sequence(4, seed + 10).unwrap();
            let leaf = model.topology.leaf_ids()[0];
            let k =
                kalman_loglik(model.leaf_params(leaf), &obs.y[&leaf], &obs.observed[&leaf]).unwrap();
            let e = exact_loglik_enumerate(&model, &obs, &TinyLimits::default()).unwrap();
            assert!((k - e).abs() < 1e-10);
        }
    }

    #[test]
    fn enumeration_is_permutation_invariant() {
        for seed in [2u64, 5, 8] {
            let model = random_tiny_dst(seed);
            let (_, obs) = model.sample_sequence(2, seed).unwrap();
            let base = exact_loglik_enumerate(&model, &obs, &TinyLimits::default()).unwrap();
            for (id, spec) in model.topology.clone().nodes() {
                if spec.num_switch_states != 2 {
                    continue;
                }
                let mut permuted = model.clone();
                permute_node_states(&mut permuted, id, &[1, 0]);
                let got = exact_loglik_enumerate(&permuted, &obs, &TinyLimits::default()).unwrap();
                assert!((base - got).abs() < 1e-10, "node {}: {} vs {}", id, base, got);
            }
        }
    }

    #[test]
    fn structural_zero_restricts_feasible_paths() {
        // Force the leaf switch chain to stay in state 0.
        let mut model = single_leaf_model(2, 1, 1);
        let leaf = model.topology.leaf_ids()[0];
        {
            let p = model.leaf_params_mut(leaf);
            p.switch_init = DMatrix::from_vec(2, 1, vec![1.0, 0.0]);
            p.switch_trans = vec![DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 0.0])];
        }
        let obs = scalar_obs(leaf, &[0.3, -0.2, 0.5]);
        let full = exact_loglik_enumerate(&model, &obs, &TinyLimits::default()).unwrap();
        // Equivalent single-state model evaluates the only feasible path.
        let single = single_leaf_model(1, 1, 1);
        let sp = single.leaf_params(single.topology.leaf_ids()[0]);
        let direct = kalman_loglik(sp, &obs.y[&leaf], &obs.observed[&leaf]).unwrap();
        assert!((full - direct).abs() < 1e-10);
    }

    #[test]
    fn path_limit_is_enforced() {
        let model = random_tiny_dst(11);
        let (_, obs) = model.sample_sequence(40, 0).unwrap();
        let limits = TinyLimits {
            max_total_discrete_paths: 100,
            ..TinyLimits::default()
        };
        if model
            .topology
            .nodes()
            .any(|(_, s)| s.num_switch_states > 1)
        {
            assert!(matches!(
                exact_loglik_enumerate(&model, &obs, &limits),
                Err(DstError::OracleLimit { .. })
            ));
        }
    }

    #[test]
    fn naive_moments_single_gaussian() {
        let params = GaussianChainParams {
            mu_init: DVector::from_vec(vec![1.0, -2.0]),
            q_init: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            lin: vec![],
            offset: vec![],
            cov: vec![],
        };
        let stats = gaussian_chain_moments_naive(&params, &TinyLimits::default()).unwrap();
        assert!((&stats.mean[0] - &params.mu_init).abs().max() < 1e-12);
        let expected_second = &params.q_init + &params.mu_init * params.mu_init.transpose();
        assert!((&stats.second[0] - expected_second).abs().max() < 1e-10);
        let expected_entropy = 0.5 * (2.0 * (LOG_2PI + 1.0) + (2.0f64 * 1.0 - 0.25).ln());
        assert!((stats.entropy - expected_entropy).abs() < 1e-10);
    }

    #[test]
    fn naive_moments_random_walk() {
        let params = GaussianChainParams {
            mu_init: DVector::zeros(1),
            q_init: DMatrix::identity(1, 1),
            lin: vec![DMatrix::identity(1, 1); 2],
            offset: vec![DVector::zeros(1); 2],
            cov: vec![DMatrix::identity(1, 1); 2],
        };
        let stats = gaussian_chain_moments_naive(&params, &TinyLimits::default()).unwrap();
        assert!((stats.second[2][(0, 0)] - 3.0).abs() < 1e-10);
        assert!((stats.cross_at(2)[(0, 0)] - 2.0).abs() < 1e-10);
    }

    #[test]
    fn joint_gaussian_dim_limit_is_enforced() {
        let params = GaussianChainParams {
            mu_init: DVector::zeros(3),
            q_init: DMatrix::identity(3, 3),
            lin: vec![DMatrix::identity(3, 3); 30],
            offset: vec![DVector::zeros(3); 30],
            cov: vec![DMatrix::identity(3, 3); 30],
        };
        assert!(matches!(
            gaussian_chain_moments_naive(&params, &TinyLimits::default()),
            Err(DstError::OracleLimit { .. })
        ));
    }
}
