//! Structured mean-field inference for dynamical systems trees.
//!
//! The variational distribution is a product of independent chains: one
//! discrete chain per node plus one Gaussian chain per leaf. Coordinate
//! ascent cycles through the chains, each update refreshing that chain's
//! expected sufficient statistics, and the evidence bound B(Q, Theta) is
//! non-decreasing across updates.

mod discrete;
mod gaussian;

pub use discrete::{forward_backward, DiscreteChainPotentials, DiscreteChainStats};
pub use gaussian::{continuous_moments, ContinuousChainStats, GaussianChainParams};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

use crate::error::{DstError, Result};
use crate::linalg::{
    min_eigenvalue, spd_inverse, spd_logdet, symmetrize, weighted_log, LOG_2PI,
};
use crate::model::{Model, NodeParams, ObservationSet};
use crate::topology::{NodeId, NodeKind};

/// One discrete chain of the variational distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainBelief {
    pub potentials: DiscreteChainPotentials,
    pub stats: DiscreteChainStats,
}

/// The Gaussian chain of one leaf.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafBelief {
    pub params: GaussianChainParams,
    pub stats: ContinuousChainStats,
}

/// All variational parameters and their refreshed statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalState {
    pub discrete: BTreeMap<NodeId, ChainBelief>,
    pub continuous: BTreeMap<NodeId, LeafBelief>,
    pub bound: f64,
}

impl VariationalState {
    /// Singleton marginals of a node's parent chain; the root conditions on
    /// a constant single-state chain.
    fn parent_marginals(&self, model: &Model, id: NodeId, horizon: usize) -> Vec<DVector<f64>> {
        match model.topology.parent(id) {
            Some(p) => self.discrete[&p].stats.singleton.clone(),
            None => vec![DVector::from_element(1, 1.0); horizon + 1],
        }
    }

    /// JSON dump of all marginals and moments, for debugging and tests.
    pub fn diagnostic_json(&self) -> serde_json::Value {
        let mut chains = serde_json::Map::new();
        for (id, belief) in &self.discrete {
            let singles: Vec<Vec<f64>> = belief
                .stats
                .singleton
                .iter()
                .map(|v| v.iter().copied().collect())
                .collect();
            let mut entry = serde_json::json!({
                "singleton": singles,
                "entropy": belief.stats.entropy,
                "log_partition": belief.stats.log_partition,
            });
            if let Some(leaf) = self.continuous.get(id) {
                let means: Vec<Vec<f64>> = leaf
                    .stats
                    .mean
                    .iter()
                    .map(|v| v.iter().copied().collect())
                    .collect();
                entry["mean"] = serde_json::json!(means);
                entry["gaussian_entropy"] = serde_json::json!(leaf.stats.entropy);
            }
            chains.insert(id.to_string(), entry);
        }
        serde_json::json!({ "bound": self.bound, "chains": chains })
    }
}

fn model_tables(model: &Model, id: NodeId) -> (&DMatrix<f64>, &Vec<DMatrix<f64>>) {
    match &model.params[id.0] {
        NodeParams::Aggregator(p) => (&p.init, &p.trans),
        NodeParams::Leaf(p) => (&p.switch_init, &p.switch_trans),
    }
}

/// Initial variational distribution: the model's own tables marginalized
/// under uniform parent beliefs, jittered in log space by u ~ U[-0.01, 0.01]
/// per entry for symmetry breaking; Gaussian chains set from prior dynamics
/// averaged under the initial switch beliefs.
pub fn init_variational(model: &Model, obs: &ObservationSet, seed: u64) -> Result<VariationalState> {
    let horizon = obs.horizon();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut discrete = BTreeMap::new();
    let mut continuous = BTreeMap::new();

    for &id in &model.topology.dfs_order() {
        let k = model.topology.node(id).num_switch_states;
        let kp = model.topology.parent_cardinality(id);
        let (init, trans) = model_tables(model, id);
        let w = 1.0 / kp as f64;
        let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(-0.01..=0.01);
        let log_init = DVector::from_fn(k, |j, _| {
            (0..kp).map(|l| w * init[(j, l)].ln()).sum::<f64>() + jitter(&mut rng)
        });
        let log_trans = (0..horizon)
            .map(|_| {
                DMatrix::from_fn(k, k, |j, kprev| {
                    (0..kp).map(|l| w * trans[l][(j, kprev)].ln()).sum::<f64>() + jitter(&mut rng)
                })
            })
            .collect();
        let potentials = DiscreteChainPotentials { log_init, log_trans };
        let stats = forward_backward(&potentials, id)?;
        discrete.insert(id, ChainBelief { potentials, stats });
    }

    for leaf in model.topology.leaf_ids() {
        let p = model.leaf_params(leaf);
        let d = model.topology.node(leaf).x_dim;
        let weights = &discrete[&leaf].stats.singleton;
        let k = p.init_mean.len();
        let blend_mat = |mats: &[DMatrix<f64>], w: &DVector<f64>| {
            (0..k).fold(DMatrix::zeros(d, d), |acc, j| acc + &mats[j] * w[j])
        };
        let mu_init = (0..k).fold(DVector::zeros(d), |acc, j| {
            acc + &p.init_mean[j] * weights[0][j]
        });
        let params = GaussianChainParams {
            mu_init,
            q_init: blend_mat(&p.init_cov, &weights[0]),
            lin: (1..=horizon).map(|t| blend_mat(&p.dynamics, &weights[t])).collect(),
            offset: vec![DVector::zeros(d); horizon],
            cov: (1..=horizon)
                .map(|t| blend_mat(&p.dynamics_cov, &weights[t]))
                .collect(),
        };
        let stats = continuous_moments(&params);
        continuous.insert(leaf, LeafBelief { params, stats });
    }

    let mut state = VariationalState {
        discrete,
        continuous,
        bound: f64::NEG_INFINITY,
    };
    state.bound = evidence_bound(model, &state, obs)?;
    Ok(state)
}

/// Expected quadratic residual of one dynamics step under Q:
/// `E[(x_t - A x_{t-1})(x_t - A x_{t-1})']` assembled from the chain moments.
fn dynamics_residual(
    second_t: &DMatrix<f64>,
    second_prev: &DMatrix<f64>,
    cross_t: &DMatrix<f64>,
    a: &DMatrix<f64>,
) -> DMatrix<f64> {
    second_t - cross_t * a.transpose() - a * cross_t.transpose() + a * second_prev * a.transpose()
}

/// `E[(x_0 - mu)(x_0 - mu)']` from the initial moments.
fn init_residual(second0: &DMatrix<f64>, mean0: &DVector<f64>, mu: &DVector<f64>) -> DMatrix<f64> {
    second0 - mean0 * mu.transpose() - mu * mean0.transpose() + mu * mu.transpose()
}

/// Evidence bound B(Q, Theta) = E_Q[log P(S, X, Y)] + H[Q].
///
/// Cross-chain expectations factorize across the independent chains, so
/// every term involves at most a pairwise marginal of one chain weighted by
/// a singleton marginal of its parent. Emission terms at masked steps are
/// skipped.
pub fn evidence_bound(model: &Model, state: &VariationalState, obs: &ObservationSet) -> Result<f64> {
    let horizon = obs.horizon();
    let mut total = 0.0;

    for (id, _spec) in model.topology.nodes() {
        let belief = &state.discrete[&id];
        let parent = state.parent_marginals(model, id, horizon);
        let (init, trans) = model_tables(model, id);
        let k = belief.potentials.num_states();
        let kp = parent[0].len();

        for j in 0..k {
            for l in 0..kp {
                total += weighted_log(belief.stats.singleton[0][j] * parent[0][l], init[(j, l)].ln());
            }
        }
        for t in 1..=horizon {
            let pair = belief.stats.pairwise_at(t);
            for l in 0..kp {
                let pl = parent[t][l];
                if pl == 0.0 {
                    continue;
                }
                let table = &trans[l];
                for j in 0..k {
                    for kprev in 0..k {
                        total += weighted_log(pair[(j, kprev)] * pl, table[(j, kprev)].ln());
                    }
                }
            }
        }
        total += belief.stats.entropy;

        if let NodeParams::Leaf(p) = &model.params[id.0] {
            let leaf = &state.continuous[&id];
            let d = p.init_mean[0].len() as f64;
            let weights = &belief.stats.singleton;

            for (j, (mu, q0)) in p.init_mean.iter().zip(&p.init_cov).enumerate() {
                let w = weights[0][j];
                if w == 0.0 {
                    continue;
                }
                let logdet = spd_logdet(q0).ok_or(DstError::NotPositiveDefinite {
                    path: format!("params.{}.q0[{}]", id, j),
                })?;
                let quad = (spd_inverse(q0).unwrap()
                    * init_residual(&leaf.stats.second[0], &leaf.stats.mean[0], mu))
                .trace();
                total += w * (-0.5 * (d * LOG_2PI + logdet + quad));
            }
            for t in 1..=horizon {
                for (j, (a, q)) in p.dynamics.iter().zip(&p.dynamics_cov).enumerate() {
                    let w = weights[t][j];
                    if w == 0.0 {
                        continue;
                    }
                    let logdet = spd_logdet(q).ok_or(DstError::NotPositiveDefinite {
                        path: format!("params.{}.Q[{}]", id, j),
                    })?;
                    let resid = dynamics_residual(
                        &leaf.stats.second[t],
                        &leaf.stats.second[t - 1],
                        leaf.stats.cross_at(t),
                        a,
                    );
                    let quad = (spd_inverse(q).unwrap() * resid).trace();
                    total += w * (-0.5 * (d * LOG_2PI + logdet + quad));
                }
            }

            let e = p.emission.nrows() as f64;
            let r_inv = spd_inverse(&p.emission_cov).ok_or(DstError::NotPositiveDefinite {
                path: format!("params.{}.R", id),
            })?;
            let r_logdet = spd_logdet(&p.emission_cov).unwrap();
            let y = &obs.y[&id];
            for t in 0..=horizon {
                if !obs.is_observed(id, t) {
                    continue;
                }
                let yt = &y[t];
                let cm = &p.emission * &leaf.stats.mean[t];
                let resid = yt * yt.transpose() - yt * cm.transpose() - &cm * yt.transpose()
                    + &p.emission * &leaf.stats.second[t] * p.emission.transpose();
                let quad = (&r_inv * resid).trace();
                total += -0.5 * (e * LOG_2PI + r_logdet + quad);
            }

            total += leaf.stats.entropy;
        }
    }

    Ok(total)
}

/// Coordinate update of an aggregator chain's potentials. Each child's
/// contribution uses that child's own conditional table (aggregator or leaf
/// switch table), weighted by the child's pairwise marginals.
pub fn update_aggregator_potentials(
    state: &mut VariationalState,
    model: &Model,
    id: NodeId,
) -> Result<()> {
    let horizon = state.discrete[&id].potentials.horizon();
    let k = model.topology.node(id).num_switch_states;
    let parent = state.parent_marginals(model, id, horizon);
    let (init, trans) = model_tables(model, id);
    let kp = parent[0].len();

    let children: Vec<NodeId> = model.topology.children(id).to_vec();

    let log_init = DVector::from_fn(k, |j, _| {
        let mut v = (0..kp)
            .map(|l| weighted_log(parent[0][l], init[(j, l)].ln()))
            .sum::<f64>();
        for &c in &children {
            let (c_init, _) = model_tables(model, c);
            let cs = &state.discrete[&c].stats.singleton[0];
            for h in 0..cs.len() {
                v += weighted_log(cs[h], c_init[(h, j)].ln());
            }
        }
        v
    });

    let log_trans: Vec<DMatrix<f64>> = (1..=horizon)
        .map(|t| {
            DMatrix::from_fn(k, k, |j, kprev| {
                let mut v = (0..kp)
                    .map(|l| weighted_log(parent[t][l], trans[l][(j, kprev)].ln()))
                    .sum::<f64>();
                // Children couple only through the aggregator's current state j.
                for &c in &children {
                    let (_, c_trans) = model_tables(model, c);
                    let pair = state.discrete[&c].stats.pairwise_at(t);
                    let table = &c_trans[j];
                    for h in 0..pair.nrows() {
                        for i in 0..pair.ncols() {
                            v += weighted_log(pair[(h, i)], table[(h, i)].ln());
                        }
                    }
                }
                v
            })
        })
        .collect();

    let potentials = DiscreteChainPotentials { log_init, log_trans };
    let stats = forward_backward(&potentials, id)?;
    state.discrete.insert(id, ChainBelief { potentials, stats });
    Ok(())
}

/// Coordinate update of a leaf's switch-chain potentials. Both the initial
/// and the transition potentials carry the Gaussian terms
/// `-0.5 log|Q_j| - 0.5 E[(x_t - A_j x_{t-1})' Q_j^{-1} (x_t - A_j x_{t-1})]`
/// expanded through the current continuous moments.
pub fn update_leaf_switch_potentials(
    state: &mut VariationalState,
    model: &Model,
    id: NodeId,
) -> Result<()> {
    let p = model.leaf_params(id);
    let horizon = state.discrete[&id].potentials.horizon();
    let k = model.topology.node(id).num_switch_states;
    let parent = state.parent_marginals(model, id, horizon);
    let kp = parent[0].len();
    let cstats = state.continuous[&id].stats.clone();

    let mut init_logdet = vec![0.0; k];
    let mut init_quad = vec![0.0; k];
    for j in 0..k {
        init_logdet[j] = spd_logdet(&p.init_cov[j]).ok_or(DstError::NotPositiveDefinite {
            path: format!("params.{}.q0[{}]", id, j),
        })?;
        let inv = spd_inverse(&p.init_cov[j]).unwrap();
        init_quad[j] =
            (inv * init_residual(&cstats.second[0], &cstats.mean[0], &p.init_mean[j])).trace();
    }

    let log_init = DVector::from_fn(k, |j, _| {
        (0..kp)
            .map(|l| weighted_log(parent[0][l], p.switch_init[(j, l)].ln()))
            .sum::<f64>()
            - 0.5 * init_logdet[j]
            - 0.5 * init_quad[j]
    });

    let mut dyn_logdet = vec![0.0; k];
    let mut dyn_inv = Vec::with_capacity(k);
    for j in 0..k {
        dyn_logdet[j] = spd_logdet(&p.dynamics_cov[j]).ok_or(DstError::NotPositiveDefinite {
            path: format!("params.{}.Q[{}]", id, j),
        })?;
        dyn_inv.push(spd_inverse(&p.dynamics_cov[j]).unwrap());
    }

    let log_trans: Vec<DMatrix<f64>> = (1..=horizon)
        .map(|t| {
            let quad: Vec<f64> = (0..k)
                .map(|j| {
                    let resid = dynamics_residual(
                        &cstats.second[t],
                        &cstats.second[t - 1],
                        cstats.cross_at(t),
                        &p.dynamics[j],
                    );
                    (&dyn_inv[j] * resid).trace()
                })
                .collect();
            DMatrix::from_fn(k, k, |j, kprev| {
                (0..kp)
                    .map(|l| weighted_log(parent[t][l], p.switch_trans[l][(j, kprev)].ln()))
                    .sum::<f64>()
                    - 0.5 * dyn_logdet[j]
                    - 0.5 * quad[j]
            })
        })
        .collect();

    let potentials = DiscreteChainPotentials { log_init, log_trans };
    let stats = forward_backward(&potentials, id)?;
    state.discrete.insert(id, ChainBelief { potentials, stats });
    Ok(())
}

/// Coordinate update of a leaf's Gaussian chain: the backward recursion
/// assembling per-step precisions from the switch marginals, then the
/// initial-step boundary update, then a forward moment refresh. Emission
/// terms are dropped at masked time steps.
pub fn update_leaf_continuous(
    state: &mut VariationalState,
    model: &Model,
    id: NodeId,
    obs: &ObservationSet,
) -> Result<()> {
    let p = model.leaf_params(id);
    let horizon = state.discrete[&id].potentials.horizon();
    let k = model.topology.node(id).num_switch_states;
    let d = model.topology.node(id).x_dim;
    let weights = state.discrete[&id].stats.singleton.clone();
    let y = &obs.y[&id];

    let mut q_inv = Vec::with_capacity(k);
    let mut q_inv_a = Vec::with_capacity(k);
    let mut a_q_inv_a = Vec::with_capacity(k);
    let mut q0_inv = Vec::with_capacity(k);
    for j in 0..k {
        let inv = spd_inverse(&p.dynamics_cov[j]).ok_or(DstError::NotPositiveDefinite {
            path: format!("params.{}.Q[{}]", id, j),
        })?;
        q_inv_a.push(&inv * &p.dynamics[j]);
        a_q_inv_a.push(symmetrize(&(p.dynamics[j].transpose() * &inv * &p.dynamics[j])));
        q_inv.push(inv);
        q0_inv.push(spd_inverse(&p.init_cov[j]).ok_or(DstError::NotPositiveDefinite {
            path: format!("params.{}.q0[{}]", id, j),
        })?);
    }
    let r_inv = spd_inverse(&p.emission_cov).ok_or(DstError::NotPositiveDefinite {
        path: format!("params.{}.R", id),
    })?;
    let ct_r_inv = p.emission.transpose() * &r_inv;
    let ct_r_inv_c = symmetrize(&(&ct_r_inv * &p.emission));

    let mut lin = vec![DMatrix::zeros(d, d); horizon];
    let mut offset = vec![DVector::zeros(d); horizon];
    let mut cov = vec![DMatrix::zeros(d, d); horizon];
    let mut prec = vec![DMatrix::zeros(d, d); horizon];

    for t in (1..=horizon).rev() {
        let mut precision = DMatrix::zeros(d, d);
        for j in 0..k {
            precision += &q_inv[j] * weights[t][j];
        }
        if t < horizon {
            let mut look_ahead = DMatrix::zeros(d, d);
            for j in 0..k {
                look_ahead += &a_q_inv_a[j] * weights[t + 1][j];
            }
            look_ahead -= lin[t].transpose() * &prec[t] * &lin[t];
            precision += look_ahead;
        }
        if obs.is_observed(id, t) {
            precision += &ct_r_inv_c;
        }
        let precision = symmetrize(&precision);
        if min_eigenvalue(&precision) <= 1e-12 {
            return Err(DstError::SingularPrecision { node: id, t });
        }
        let cov_t = spd_inverse(&precision).ok_or(DstError::SingularPrecision { node: id, t })?;

        let mut drive = DMatrix::zeros(d, d);
        for j in 0..k {
            drive += &q_inv_a[j] * weights[t][j];
        }
        let lin_t = &cov_t * drive;

        let mut rhs = DVector::zeros(d);
        if obs.is_observed(id, t) {
            rhs += &ct_r_inv * &y[t];
        }
        if t < horizon {
            rhs += lin[t].transpose() * &prec[t] * &offset[t];
        }
        let offset_t = &cov_t * rhs;

        lin[t - 1] = lin_t;
        offset[t - 1] = offset_t;
        cov[t - 1] = cov_t;
        prec[t - 1] = precision;
    }

    // Boundary update at t = 0.
    let mut precision0 = DMatrix::zeros(d, d);
    for j in 0..k {
        precision0 += &q0_inv[j] * weights[0][j];
    }
    if horizon >= 1 {
        let mut look_ahead = DMatrix::zeros(d, d);
        for j in 0..k {
            look_ahead += &a_q_inv_a[j] * weights[1][j];
        }
        look_ahead -= lin[0].transpose() * &prec[0] * &lin[0];
        precision0 += look_ahead;
    }
    if obs.is_observed(id, 0) {
        precision0 += &ct_r_inv_c;
    }
    let precision0 = symmetrize(&precision0);
    if min_eigenvalue(&precision0) <= 1e-12 {
        return Err(DstError::SingularPrecision { node: id, t: 0 });
    }
    let q_init = spd_inverse(&precision0).ok_or(DstError::SingularPrecision { node: id, t: 0 })?;
    let mut rhs0 = DVector::zeros(d);
    for j in 0..k {
        rhs0 += &q0_inv[j] * &p.init_mean[j] * weights[0][j];
    }
    if obs.is_observed(id, 0) {
        rhs0 += &ct_r_inv * &y[0];
    }
    if horizon >= 1 {
        rhs0 += lin[0].transpose() * &prec[0] * &offset[0];
    }
    let mu_init = &q_init * rhs0;

    let params = GaussianChainParams {
        mu_init,
        q_init,
        lin,
        offset,
        cov,
    };
    let stats = continuous_moments(&params);
    state.continuous.insert(id, LeafBelief { params, stats });
    Ok(())
}

fn check_monotone(model_bound_before: f64, after: f64, node: NodeId) -> Result<()> {
    let slack = 1e-6 * (1.0 + model_bound_before.abs());
    if after < model_bound_before - slack {
        return Err(DstError::MonotonicityViolated {
            node,
            before: model_bound_before,
            after,
        });
    }
    Ok(())
}

/// One full coordinate-ascent sweep: every leaf (continuous then switch
/// chain) in depth-first order, then aggregators deepest first. The bound is
/// re-evaluated after every chain update and guarded by the monotonicity
/// tripwire.
pub fn sweep(model: &Model, state: &mut VariationalState, obs: &ObservationSet) -> Result<()> {
    let dfs = model.topology.dfs_order();
    for &id in &dfs {
        if model.topology.node(id).kind != NodeKind::Leaf {
            continue;
        }
        let before = state.bound;
        update_leaf_continuous(state, model, id, obs)?;
        state.bound = evidence_bound(model, state, obs)?;
        check_monotone(before, state.bound, id)?;

        let before = state.bound;
        update_leaf_switch_potentials(state, model, id)?;
        state.bound = evidence_bound(model, state, obs)?;
        check_monotone(before, state.bound, id)?;
    }

    let mut aggregators: Vec<NodeId> = dfs
        .iter()
        .copied()
        .filter(|&id| model.topology.node(id).kind == NodeKind::Aggregator)
        .collect();
    aggregators.sort_by_key(|&id| std::cmp::Reverse(model.topology.depth(id)));
    for id in aggregators {
        let before = state.bound;
        update_aggregator_potentials(state, model, id)?;
        state.bound = evidence_bound(model, state, obs)?;
        check_monotone(before, state.bound, id)?;
    }
    Ok(())
}

/// Runs mean-field coordinate ascent from a fresh initialization until the
/// per-sweep bound improvement drops below `tol` or `max_sweeps` is reached.
/// Returns the converged state and the bound trace (init + one entry per
/// sweep).
pub fn fit_variational(
    model: &Model,
    obs: &ObservationSet,
    tol: f64,
    max_sweeps: usize,
    seed: u64,
) -> Result<(VariationalState, Vec<f64>)> {
    let state = init_variational(model, obs, seed)?;
    fit_variational_from(model, obs, state, tol, max_sweeps)
}

/// Same as [`fit_variational`] but warm-started from an existing state (the
/// bound is recomputed against the given model first).
pub fn fit_variational_from(
    model: &Model,
    obs: &ObservationSet,
    mut state: VariationalState,
    tol: f64,
    max_sweeps: usize,
) -> Result<(VariationalState, Vec<f64>)> {
    state.bound = evidence_bound(model, &state, obs)?;
    let mut trace = vec![state.bound];
    for _ in 0..max_sweeps {
        let before = state.bound;
        sweep(model, &mut state, obs)?;
        trace.push(state.bound);
        if state.bound - before < tol {
            break;
        }
    }
    Ok((state, trace))
}
