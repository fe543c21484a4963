//! Generative parameters of a dynamical systems tree, complete-data
//! log-density evaluation and ancestral sampling.

use nalgebra::{DMatrix, DVector};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeMap;

use crate::error::{DstError, Result};
use crate::linalg::{log_gaussian, spd_cholesky};
use crate::topology::{NodeId, NodeKind, Topology};

/// Multinomial tables of an aggregating chain.
///
/// `init` is `K x K_parent` with entry `(j, k)` the probability of starting
/// in state `j` given parent state `k`. `trans[l]` is the `K x K` transition
/// matrix (current state row, previous state column) given parent state `l`.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorParams {
    pub init: DMatrix<f64>,
    pub trans: Vec<DMatrix<f64>>,
}

/// Parameters of a leaf switching linear dynamical system.
///
/// Switch tables are laid out as in [`AggregatorParams`]; the remaining
/// fields are per-switch-state Gaussian dynamics and the shared emission map.
#[derive(Debug, Clone, PartialEq)]
pub struct LeafParams {
    pub switch_init: DMatrix<f64>,
    pub switch_trans: Vec<DMatrix<f64>>,
    /// Initial continuous mean per switch state.
    pub init_mean: Vec<DVector<f64>>,
    /// Initial continuous covariance per switch state.
    pub init_cov: Vec<DMatrix<f64>>,
    /// State transition matrix per switch state.
    pub dynamics: Vec<DMatrix<f64>>,
    /// Process noise covariance per switch state.
    pub dynamics_cov: Vec<DMatrix<f64>>,
    /// Emission matrix (y_dim x x_dim).
    pub emission: DMatrix<f64>,
    /// Emission noise covariance (y_dim x y_dim).
    pub emission_cov: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeParams {
    Aggregator(AggregatorParams),
    Leaf(LeafParams),
}

/// A fully parameterized dynamical systems tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub topology: Topology,
    /// Indexed by node id.
    pub params: Vec<NodeParams>,
}

/// One realization of all hidden variables.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenAssignment {
    /// Discrete state sequence per node, length T+1.
    pub states: BTreeMap<NodeId, Vec<usize>>,
    /// Continuous state sequence per leaf, length T+1.
    pub x: BTreeMap<NodeId, Vec<DVector<f64>>>,
}

/// Observed emission sequences, one per leaf, with a missingness mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationSet {
    pub y: BTreeMap<NodeId, Vec<DVector<f64>>>,
    /// true = observed. Same length as `y` per leaf.
    pub observed: BTreeMap<NodeId, Vec<bool>>,
}

impl ObservationSet {
    pub fn fully_observed(y: BTreeMap<NodeId, Vec<DVector<f64>>>) -> Self {
        let observed = y.iter().map(|(&id, seq)| (id, vec![true; seq.len()])).collect();
        ObservationSet { y, observed }
    }

    /// Number of time steps T (sequences have length T+1).
    pub fn horizon(&self) -> usize {
        self.y.values().next().map(|s| s.len().saturating_sub(1)).unwrap_or(0)
    }

    pub fn is_observed(&self, leaf: NodeId, t: usize) -> bool {
        self.observed.get(&leaf).map(|m| m[t]).unwrap_or(false)
    }

    /// Subtracts each leaf's first observed point from its whole sequence.
    pub fn offset_origin(&mut self) {
        for (id, seq) in self.y.iter_mut() {
            let mask = &self.observed[id];
            if let Some(first) = (0..seq.len()).find(|&t| mask[t]) {
                let origin = seq[first].clone();
                for v in seq.iter_mut() {
                    *v -= &origin;
                }
            }
        }
    }
}

impl Model {
    pub fn aggregator_params(&self, id: NodeId) -> &AggregatorParams {
        match &self.params[id.0] {
            NodeParams::Aggregator(p) => p,
            NodeParams::Leaf(_) => panic!("node {} is a leaf", id),
        }
    }

    pub fn leaf_params(&self, id: NodeId) -> &LeafParams {
        match &self.params[id.0] {
            NodeParams::Leaf(p) => p,
            NodeParams::Aggregator(_) => panic!("node {} is an aggregator", id),
        }
    }

    pub fn leaf_params_mut(&mut self, id: NodeId) -> &mut LeafParams {
        match &mut self.params[id.0] {
            NodeParams::Leaf(p) => p,
            NodeParams::Aggregator(_) => panic!("node {} is an aggregator", id),
        }
    }

    /// Checks parameter shapes against the topology plus table normalization
    /// (1e-9) and covariance positive definiteness. Returns the first failure.
    pub fn validate(&self) -> Result<()> {
        let violations = self.topology.validate();
        if let Some(v) = violations.first() {
            return Err(DstError::InvalidTopology(v.to_string()));
        }
        if self.params.len() != self.topology.len() {
            return Err(DstError::Invalid(format!(
                "expected {} parameter blocks, found {}",
                self.topology.len(),
                self.params.len()
            )));
        }
        for (id, spec) in self.topology.nodes() {
            let k = spec.num_switch_states;
            let kp = self.topology.parent_cardinality(id);
            match (&self.params[id.0], spec.kind) {
                (NodeParams::Aggregator(p), NodeKind::Aggregator) => {
                    check_table(&p.init, k, kp, &format!("params.{}.phi0", id))?;
                    check_trans(&p.trans, k, kp, &format!("params.{}.phi", id))?;
                }
                (NodeParams::Leaf(p), NodeKind::Leaf) => {
                    let d = spec.x_dim;
                    let e = spec.y_dim;
                    check_table(&p.switch_init, k, kp, &format!("params.{}.psi0", id))?;
                    check_trans(&p.switch_trans, k, kp, &format!("params.{}.psi", id))?;
                    for (name, mats, rows, cols) in [
                        ("q0", &p.init_cov, d, d),
                        ("A", &p.dynamics, d, d),
                        ("Q", &p.dynamics_cov, d, d),
                    ] {
                        if mats.len() != k {
                            return Err(DstError::Document {
                                path: format!("params.{}.{}", id, name),
                                what: format!("expected {} per-state matrices, found {}", k, mats.len()),
                            });
                        }
                        for (j, m) in mats.iter().enumerate() {
                            check_shape(m, rows, cols, &format!("params.{}.{}[{}]", id, name, j))?;
                        }
                    }
                    if p.init_mean.len() != k {
                        return Err(DstError::Document {
                            path: format!("params.{}.mu0", id),
                            what: format!("expected {} vectors, found {}", k, p.init_mean.len()),
                        });
                    }
                    for (j, v) in p.init_mean.iter().enumerate() {
                        if v.len() != d {
                            return Err(DstError::Document {
                                path: format!("params.{}.mu0[{}]", id, j),
                                what: format!("expected length {}, found {}", d, v.len()),
                            });
                        }
                    }
                    check_shape(&p.emission, e, d, &format!("params.{}.C", id))?;
                    check_shape(&p.emission_cov, e, e, &format!("params.{}.R", id))?;
                    for (j, m) in p.init_cov.iter().enumerate() {
                        check_spd(m, &format!("params.{}.q0[{}]", id, j))?;
                    }
                    for (j, m) in p.dynamics_cov.iter().enumerate() {
                        check_spd(m, &format!("params.{}.Q[{}]", id, j))?;
                    }
                    check_spd(&p.emission_cov, &format!("params.{}.R", id))?;
                }
                _ => {
                    return Err(DstError::ShapeMismatch {
                        node: id,
                        what: "parameter kind does not match node kind".into(),
                    })
                }
            }
        }
        Ok(())
    }

    /// log P(S, X, Y): sum of all node-local conditional log-densities.
    /// Emission terms at masked time steps are skipped.
    pub fn complete_loglik(
        &self,
        assignment: &HiddenAssignment,
        obs: &ObservationSet,
    ) -> Result<f64> {
        let horizon = obs.horizon();
        let mut total = 0.0;
        for (id, spec) in self.topology.nodes() {
            let states = assignment.states.get(&id).ok_or_else(|| DstError::ShapeMismatch {
                node: id,
                what: "missing state sequence".into(),
            })?;
            if states.len() != horizon + 1 {
                return Err(DstError::ShapeMismatch {
                    node: id,
                    what: format!("state sequence length {} != {}", states.len(), horizon + 1),
                });
            }
            let parent_states = spec.parent.map(|p| &assignment.states[&p]);
            let pstate = |t: usize| parent_states.map(|s| s[t]).unwrap_or(0);

            let (init, trans) = match &self.params[id.0] {
                NodeParams::Aggregator(p) => (&p.init, &p.trans),
                NodeParams::Leaf(p) => (&p.switch_init, &p.switch_trans),
            };
            total += init[(states[0], pstate(0))].ln();
            for t in 1..=horizon {
                total += trans[pstate(t)][(states[t], states[t - 1])].ln();
            }

            if let NodeParams::Leaf(p) = &self.params[id.0] {
                let x = assignment.x.get(&id).ok_or_else(|| DstError::ShapeMismatch {
                    node: id,
                    what: "missing continuous sequence".into(),
                })?;
                if x.len() != horizon + 1 {
                    return Err(DstError::ShapeMismatch {
                        node: id,
                        what: "continuous sequence length mismatch".into(),
                    });
                }
                let j0 = states[0];
                total += log_gaussian(&x[0], &p.init_mean[j0], &p.init_cov[j0]).ok_or(
                    DstError::NotPositiveDefinite {
                        path: format!("params.{}.q0[{}]", id, j0),
                    },
                )?;
                for t in 1..=horizon {
                    let j = states[t];
                    let mean = &p.dynamics[j] * &x[t - 1];
                    total += log_gaussian(&x[t], &mean, &p.dynamics_cov[j]).ok_or(
                        DstError::NotPositiveDefinite {
                            path: format!("params.{}.Q[{}]", id, j),
                        },
                    )?;
                }
                let y = obs.y.get(&id).ok_or_else(|| DstError::ShapeMismatch {
                    node: id,
                    what: "missing observation sequence".into(),
                })?;
                for t in 0..=horizon {
                    if obs.is_observed(id, t) {
                        let mean = &p.emission * &x[t];
                        total += log_gaussian(&y[t], &mean, &p.emission_cov).ok_or(
                            DstError::NotPositiveDefinite {
                                path: format!("params.{}.R", id),
                            },
                        )?;
                    }
                }
            }
        }
        Ok(total)
    }

    /// Ancestral sampling: for each time step, nodes are visited top-down in
    /// depth-first topology order, so a parent's state at time t is always
    /// drawn before its children's. Deterministic given the seed.
    pub fn sample_sequence(
        &self,
        horizon: usize,
        seed: u64,
    ) -> Result<(HiddenAssignment, ObservationSet)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let order = self.topology.dfs_order();
        let mut states: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
        let mut x: BTreeMap<NodeId, Vec<DVector<f64>>> = BTreeMap::new();
        let mut y: BTreeMap<NodeId, Vec<DVector<f64>>> = BTreeMap::new();
        for &id in &order {
            states.insert(id, Vec::with_capacity(horizon + 1));
            if self.topology.node(id).kind == NodeKind::Leaf {
                x.insert(id, Vec::with_capacity(horizon + 1));
                y.insert(id, Vec::with_capacity(horizon + 1));
            }
        }

        for t in 0..=horizon {
            for &id in &order {
                let pstate = self
                    .topology
                    .parent(id)
                    .map(|p| states[&p][t])
                    .unwrap_or(0);
                let (init, trans) = match &self.params[id.0] {
                    NodeParams::Aggregator(p) => (&p.init, &p.trans),
                    NodeParams::Leaf(p) => (&p.switch_init, &p.switch_trans),
                };
                let s = if t == 0 {
                    draw_categorical(&mut rng, init.column(pstate).iter().copied())
                } else {
                    let prev = states[&id][t - 1];
                    draw_categorical(&mut rng, trans[pstate].column(prev).iter().copied())
                };
                states.get_mut(&id).unwrap().push(s);

                if let NodeParams::Leaf(p) = &self.params[id.0] {
                    let (mean, cov, what) = if t == 0 {
                        (p.init_mean[s].clone(), &p.init_cov[s], "q0")
                    } else {
                        let prev = &x[&id][t - 1];
                        (&p.dynamics[s] * prev, &p.dynamics_cov[s], "Q")
                    };
                    let xt = draw_gaussian(&mut rng, &mean, cov).ok_or(
                        DstError::NotPositiveDefinite {
                            path: format!("params.{}.{}[{}]", id, what, s),
                        },
                    )?;
                    let ymean = &p.emission * &xt;
                    let yt = draw_gaussian(&mut rng, &ymean, &p.emission_cov).ok_or(
                        DstError::NotPositiveDefinite {
                            path: format!("params.{}.R", id),
                        },
                    )?;
                    x.get_mut(&id).unwrap().push(xt);
                    y.get_mut(&id).unwrap().push(yt);
                }
            }
        }

        Ok((
            HiddenAssignment { states, x },
            ObservationSet::fully_observed(y),
        ))
    }
}

fn draw_categorical(rng: &mut impl Rng, probs: impl Iterator<Item = f64>) -> usize {
    let probs: Vec<f64> = probs.collect();
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn draw_gaussian(
    rng: &mut impl Rng,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
) -> Option<DVector<f64>> {
    let chol = spd_cholesky(cov)?;
    let z = DVector::from_iterator(mean.len(), (0..mean.len()).map(|_| StandardNormal.sample(rng)));
    Some(mean + chol.l() * z)
}

fn check_shape(m: &DMatrix<f64>, rows: usize, cols: usize, path: &str) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(DstError::Document {
            path: path.into(),
            what: format!("expected {}x{}, found {}x{}", rows, cols, m.nrows(), m.ncols()),
        });
    }
    Ok(())
}

fn check_table(m: &DMatrix<f64>, k: usize, kp: usize, path: &str) -> Result<()> {
    check_shape(m, k, kp, path)?;
    for col in 0..kp {
        let sum: f64 = m.column(col).iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(DstError::NotNormalized {
                path: format!("{}[:,{}]", path, col),
                sum,
            });
        }
        if m.column(col).iter().any(|&v| v < 0.0) {
            return Err(DstError::Document {
                path: path.into(),
                what: "negative probability entry".into(),
            });
        }
    }
    Ok(())
}

fn check_trans(tables: &[DMatrix<f64>], k: usize, kp: usize, path: &str) -> Result<()> {
    if tables.len() != kp {
        return Err(DstError::Document {
            path: path.into(),
            what: format!("expected {} parent slices, found {}", kp, tables.len()),
        });
    }
    for (l, m) in tables.iter().enumerate() {
        check_table(m, k, k, &format!("{}[l={}]", path, l))?;
    }
    Ok(())
}

fn check_spd(m: &DMatrix<f64>, path: &str) -> Result<()> {
    let sym_err = (m - m.transpose()).abs().max();
    if sym_err > 1e-9 * (1.0 + m.abs().max()) || spd_cholesky(m).is_none() {
        return Err(DstError::NotPositiveDefinite { path: path.into() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::NodeSpec;

    fn unit_leaf_model() -> Model {
        let topology = Topology::new(vec![NodeSpec::leaf(None, 1, 1, 1)]);
        Model {
            topology,
            params: vec![NodeParams::Leaf(LeafParams {
                switch_init: DMatrix::from_vec(1, 1, vec![1.0]),
                switch_trans: vec![DMatrix::from_vec(1, 1, vec![1.0])],
                init_mean: vec![DVector::from_vec(vec![0.0])],
                init_cov: vec![DMatrix::from_vec(1, 1, vec![1.0])],
                dynamics: vec![DMatrix::from_vec(1, 1, vec![0.5])],
                dynamics_cov: vec![DMatrix::from_vec(1, 1, vec![1.0])],
                emission: DMatrix::from_vec(1, 1, vec![1.0]),
                emission_cov: DMatrix::from_vec(1, 1, vec![1.0]),
            })],
        }
    }

    #[test]
    fn complete_loglik_two_standard_normals() {
        let model = unit_leaf_model();
        let mut states = BTreeMap::new();
        states.insert(NodeId(0), vec![0]);
        let mut x = BTreeMap::new();
        x.insert(NodeId(0), vec![DVector::from_vec(vec![0.0])]);
        let mut y = BTreeMap::new();
        y.insert(NodeId(0), vec![DVector::from_vec(vec![0.0])]);
        let obs = ObservationSet::fully_observed(y);
        let ll = model
            .complete_loglik(&HiddenAssignment { states, x }, &obs)
            .unwrap();
        assert!((ll - (-crate::linalg::LOG_2PI)).abs() < 1e-9);
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let model = unit_leaf_model();
        let (a1, o1) = model.sample_sequence(10, 42).unwrap();
        let (a2, o2) = model.sample_sequence(10, 42).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(o1, o2);
        let (_, o3) = model.sample_sequence(10, 43).unwrap();
        assert_ne!(o1, o3);
    }

    #[test]
    fn sampled_sequence_has_finite_loglik() {
        let model = unit_leaf_model();
        let (assignment, obs) = model.sample_sequence(20, 7).unwrap();
        let ll = model.complete_loglik(&assignment, &obs).unwrap();
        assert!(ll.is_finite());
    }

    #[test]
    fn initial_state_mean_obeys_law_of_large_numbers() {
        let model = unit_leaf_model();
        let m = 200;
        let mut sum = 0.0;
        for seed in 0..m {
            let (a, _) = model.sample_sequence(0, seed).unwrap();
            sum += a.x[&NodeId(0)][0][0];
        }
        let mean = sum / m as f64;
        // mu0 = 0, q0 = 1: tolerance 3 * sqrt(q0 / M)
        assert!(mean.abs() < 3.0 * (1.0f64 / m as f64).sqrt());
    }
}
