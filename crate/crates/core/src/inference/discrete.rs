//! Single discrete chain: unnormalized potentials and exact forward-backward
//! marginals, computed in log space.

use nalgebra::{DMatrix, DVector};

use crate::error::{DstError, Result};
use crate::linalg::{log_sum_exp, weighted_log};
use crate::topology::NodeId;

/// Unnormalized potentials of one discrete chain, stored as logs.
///
/// The chain distribution is proportional to
/// `init(s_0) * prod_t trans[t](s_t, s_{t-1})`, with `trans[t]` indexed
/// (current state row, previous state column) for t = 1..=T.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChainPotentials {
    pub log_init: DVector<f64>,
    pub log_trans: Vec<DMatrix<f64>>,
}

impl DiscreteChainPotentials {
    pub fn num_states(&self) -> usize {
        self.log_init.len()
    }

    pub fn horizon(&self) -> usize {
        self.log_trans.len()
    }

    /// Uniform potentials (all-zero logs) for a chain of K states over T steps.
    pub fn uniform(k: usize, horizon: usize) -> Self {
        DiscreteChainPotentials {
            log_init: DVector::zeros(k),
            log_trans: vec![DMatrix::zeros(k, k); horizon],
        }
    }
}

/// Expected sufficient statistics of one discrete chain.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteChainStats {
    /// singleton[t][j] = Q(s_t = j), for t = 0..=T.
    pub singleton: Vec<DVector<f64>>,
    /// pairwise[t-1][(j,k)] = Q(s_t = j, s_{t-1} = k), for t = 1..=T.
    pub pairwise: Vec<DMatrix<f64>>,
    /// Entropy of the normalized chain distribution.
    pub entropy: f64,
    /// log of the normalizer of the unnormalized chain.
    pub log_partition: f64,
}

impl DiscreteChainStats {
    pub fn pairwise_at(&self, t: usize) -> &DMatrix<f64> {
        &self.pairwise[t - 1]
    }
}

/// Exact marginals, entropy and log-partition of the chain defined by the
/// potentials. Errors with `DeadChainState` if the chain has no path with
/// positive weight through some time step.
pub fn forward_backward(
    potentials: &DiscreteChainPotentials,
    node: NodeId,
) -> Result<DiscreteChainStats> {
    let k = potentials.num_states();
    let horizon = potentials.horizon();

    if potentials.log_init.iter().all(|&v| v == f64::NEG_INFINITY) {
        return Err(DstError::DeadChainState { node, t: 0, prev: 0 });
    }

    // alpha[t][j] = log sum over paths ending in state j at time t. A fully
    // -inf column is legal while its previous state is unreachable; the chain
    // is dead only when the forward message itself loses all support.
    let mut alpha = vec![DVector::zeros(k); horizon + 1];
    alpha[0].copy_from(&potentials.log_init);
    for t in 1..=horizon {
        let trans = &potentials.log_trans[t - 1];
        for j in 0..k {
            alpha[t][j] = log_sum_exp((0..k).map(|p| alpha[t - 1][p] + trans[(j, p)]));
        }
        if alpha[t].iter().all(|&v| v == f64::NEG_INFINITY) {
            let prev = (0..k)
                .max_by(|&a, &b| alpha[t - 1][a].partial_cmp(&alpha[t - 1][b]).unwrap())
                .unwrap_or(0);
            return Err(DstError::DeadChainState { node, t, prev });
        }
    }
    let log_partition = log_sum_exp(alpha[horizon].iter().copied());
    if !log_partition.is_finite() {
        return Err(DstError::DeadChainState { node, t: horizon, prev: 0 });
    }

    let mut beta = vec![DVector::zeros(k); horizon + 1];
    for t in (0..horizon).rev() {
        let trans = &potentials.log_trans[t];
        for p in 0..k {
            beta[t][p] = log_sum_exp((0..k).map(|j| trans[(j, p)] + beta[t + 1][j]));
        }
    }

    let singleton: Vec<DVector<f64>> = (0..=horizon)
        .map(|t| {
            let mut v = DVector::from_fn(k, |j, _| (alpha[t][j] + beta[t][j] - log_partition).exp());
            let sum: f64 = v.iter().sum();
            v /= sum;
            v
        })
        .collect();

    let pairwise: Vec<DMatrix<f64>> = (1..=horizon)
        .map(|t| {
            let trans = &potentials.log_trans[t - 1];
            let mut m = DMatrix::from_fn(k, k, |j, p| {
                (alpha[t - 1][p] + trans[(j, p)] + beta[t][j] - log_partition).exp()
            });
            let sum: f64 = m.iter().sum();
            m /= sum;
            m
        })
        .collect();

    // H = log Z - E[log unnormalized potential]
    let mut expected_log = 0.0;
    for j in 0..k {
        expected_log += weighted_log(singleton[0][j], potentials.log_init[j]);
    }
    for t in 1..=horizon {
        let trans = &potentials.log_trans[t - 1];
        let pair = &pairwise[t - 1];
        for j in 0..k {
            for p in 0..k {
                expected_log += weighted_log(pair[(j, p)], trans[(j, p)]);
            }
        }
    }
    let entropy = log_partition - expected_log;

    Ok(DiscreteChainStats {
        singleton,
        pairwise,
        entropy,
        log_partition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force marginals by enumerating every path. Test oracle only.
    fn enumerate_stats(p: &DiscreteChainPotentials) -> DiscreteChainStats {
        let k = p.num_states();
        let horizon = p.horizon();
        let n = horizon + 1;
        let total = k.pow(n as u32);
        let mut weights = Vec::with_capacity(total);
        let mut paths = Vec::with_capacity(total);
        for idx in 0..total {
            let mut path = Vec::with_capacity(n);
            let mut rem = idx;
            for _ in 0..n {
                path.push(rem % k);
                rem /= k;
            }
            let mut lw = p.log_init[path[0]];
            for t in 1..n {
                lw += p.log_trans[t - 1][(path[t], path[t - 1])];
            }
            weights.push(lw);
            paths.push(path);
        }
        let log_z = log_sum_exp(weights.iter().copied());
        let probs: Vec<f64> = weights.iter().map(|&w| (w - log_z).exp()).collect();
        let mut singleton = vec![DVector::zeros(k); n];
        let mut pairwise = vec![DMatrix::zeros(k, k); horizon];
        let mut entropy = 0.0;
        for (path, &pr) in paths.iter().zip(&probs) {
            if pr > 0.0 {
                entropy -= pr * pr.ln();
            }
            for t in 0..n {
                singleton[t][path[t]] += pr;
            }
            for t in 1..n {
                pairwise[t - 1][(path[t], path[t - 1])] += pr;
            }
        }
        DiscreteChainStats {
            singleton,
            pairwise,
            entropy,
            log_partition: log_z,
        }
    }

    #[test]
    fn uniform_chain_has_uniform_marginals() {
        let p = DiscreteChainPotentials::uniform(2, 3);
        let stats = forward_backward(&p, NodeId(0)).unwrap();
        for t in 0..=3 {
            assert!((stats.singleton[t][0] - 0.5).abs() < 1e-12);
            assert!((stats.singleton[t][1] - 0.5).abs() < 1e-12);
        }
        for t in 1..=3 {
            for j in 0..2 {
                for k in 0..2 {
                    assert!((stats.pairwise_at(t)[(j, k)] - 0.25).abs() < 1e-12);
                }
            }
        }
        assert!((stats.entropy - 4.0 * 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn delta_chain_is_deterministic() {
        // potentials selecting the path 0 -> 1 -> 0
        let neg = f64::NEG_INFINITY;
        let p = DiscreteChainPotentials {
            log_init: DVector::from_vec(vec![0.0, neg]),
            log_trans: vec![
                DMatrix::from_row_slice(2, 2, &[neg, neg, 0.0, neg]),
                DMatrix::from_row_slice(2, 2, &[neg, 0.0, neg, neg]),
            ],
        };
        let stats = forward_backward(&p, NodeId(0)).unwrap();
        assert_eq!(stats.singleton[0][0], 1.0);
        assert_eq!(stats.singleton[1][1], 1.0);
        assert_eq!(stats.singleton[2][0], 1.0);
        assert_eq!(stats.pairwise_at(1)[(1, 0)], 1.0);
        assert_eq!(stats.pairwise_at(2)[(0, 1)], 1.0);
        assert!(stats.entropy.abs() < 1e-12);
    }

    #[test]
    fn random_chain_matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let (k, horizon) = (3, 4);
        let p = DiscreteChainPotentials {
            log_init: DVector::from_fn(k, |_, _| rng.gen_range(-2.0..2.0)),
            log_trans: (0..horizon)
                .map(|_| DMatrix::from_fn(k, k, |_, _| rng.gen_range(-2.0..2.0)))
                .collect(),
        };
        let fast = forward_backward(&p, NodeId(0)).unwrap();
        let slow = enumerate_stats(&p);
        for t in 0..=horizon {
            assert!((&fast.singleton[t] - &slow.singleton[t]).abs().max() < 1e-12);
        }
        for t in 1..=horizon {
            assert!((fast.pairwise_at(t) - slow.pairwise_at(t)).abs().max() < 1e-12);
        }
        assert!((fast.entropy - slow.entropy).abs() < 1e-10);
        assert!((fast.log_partition - slow.log_partition).abs() < 1e-10);
    }

    #[test]
    fn marginal_consistency_after_refresh() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let p = DiscreteChainPotentials {
            log_init: DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0)),
            log_trans: (0..5)
                .map(|_| DMatrix::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0)))
                .collect(),
        };
        let stats = forward_backward(&p, NodeId(0)).unwrap();
        for t in 0..=5 {
            assert!((stats.singleton[t].sum() - 1.0).abs() < 1e-10);
        }
        for t in 1..=5 {
            let pair = stats.pairwise_at(t);
            let row_sum: DVector<f64> = DVector::from_fn(3, |j, _| pair.row(j).sum());
            let col_sum: DVector<f64> = DVector::from_fn(3, |k2, _| pair.column(k2).sum());
            assert!((&row_sum - &stats.singleton[t]).abs().max() < 1e-10);
            assert!((&col_sum - &stats.singleton[t - 1]).abs().max() < 1e-10);
        }
    }

    #[test]
    fn dead_column_is_an_error() {
        let neg = f64::NEG_INFINITY;
        // only state 0 is reachable at time 0, and its outgoing column is dead
        let p = DiscreteChainPotentials {
            log_init: DVector::from_vec(vec![0.0, neg]),
            log_trans: vec![DMatrix::from_row_slice(2, 2, &[neg, 0.0, neg, 0.0])],
        };
        assert!(matches!(
            forward_backward(&p, NodeId(3)),
            Err(DstError::DeadChainState { node: NodeId(3), t: 1, prev: 0 })
        ));
    }
}
