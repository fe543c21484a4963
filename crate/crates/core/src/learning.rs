//! Variational EM: data-driven initialization, closed-form M-step from
//! expected sufficient statistics, the outer EM loop with optional
//! over-relaxation, and bound-based classification.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{DstError, Result};
use crate::inference::{fit_variational, fit_variational_from, VariationalState};
use crate::linalg::{eigen_floor, spd_cholesky, symmetrize};
use crate::model::{AggregatorParams, LeafParams, Model, NodeParams, ObservationSet};
use crate::topology::{NodeId, NodeKind, Topology};

/// Training data: one observation set per sequence. Sequences may differ in
/// length but must share the topology's leaf set and dimensions.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub sequences: Vec<ObservationSet>,
}

/// EM loop configuration.
#[derive(Debug, Clone)]
pub struct EmConfig {
    /// Inner mean-field stopping tolerance (per sweep).
    pub e_tol: f64,
    /// Outer relative bound-improvement stop.
    pub em_tol: f64,
    pub max_em_iters: usize,
    pub max_sweeps: usize,
    pub overrelax: bool,
    pub eta_init: f64,
    pub eta_grow: f64,
    pub eta_shrink: f64,
    pub seed: u64,
    /// Eigenvalue floor applied to every re-estimated covariance.
    pub covariance_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            e_tol: 1e-6,
            em_tol: 1e-5,
            max_em_iters: 100,
            max_sweeps: 200,
            overrelax: false,
            eta_init: 1.0,
            eta_grow: 1.1,
            eta_shrink: 0.5,
            seed: 0,
            covariance_floor: 1e-6,
        }
    }
}

/// Outcome of an EM run.
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Summed bound over sequences, one entry per EM iteration.
    pub bound_per_iter: Vec<f64>,
    pub iters_run: usize,
    pub converged: bool,
    /// Over-relaxation factor after each iteration (when enabled).
    pub eta_trace: Vec<f64>,
}

/// Classification outcome: best model index plus per-model bounds.
#[derive(Debug, Clone)]
pub struct ClassifyOutcome {
    pub label: usize,
    pub scores: Vec<f64>,
    /// Per-model inference failure, if any (score is -inf then).
    pub errors: Vec<Option<String>>,
    pub tie: bool,
}

/// Moment-based initialization: per leaf, the concatenated observed data is
/// split into K contiguous equal subsets and a linear dynamical system is
/// fit to each via lag-1 least squares on a principal-direction proxy state.
/// Discrete tables start near maximum entropy with multiplicative jitter
/// exp(u), u ~ U[-0.05, 0.05].
pub fn initialize_params(topology: &Topology, data: &Dataset, seed: u64) -> Result<Model> {
    if data.sequences.is_empty() {
        return Err(DstError::Invalid("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(topology.len());

    for (id, spec) in topology.nodes() {
        let k = spec.num_switch_states;
        let kp = topology.parent_cardinality(id);
        let jittered_table = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
            let mut m = DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-0.05..=0.05f64).exp());
            for c in 0..cols {
                let sum: f64 = m.column(c).iter().sum();
                for r in 0..rows {
                    m[(r, c)] /= sum;
                }
            }
            m
        };
        match spec.kind {
            NodeKind::Aggregator => {
                params.push(NodeParams::Aggregator(AggregatorParams {
                    init: jittered_table(&mut rng, k, kp),
                    trans: (0..kp).map(|_| jittered_table(&mut rng, k, k)).collect(),
                }));
            }
            NodeKind::Leaf => {
                let leaf = init_leaf(id, spec.x_dim, spec.y_dim, k, kp, data, &mut rng)?;
                params.push(NodeParams::Leaf(leaf));
            }
        }
    }

    Ok(Model {
        topology: topology.clone(),
        params,
    })
}

fn init_leaf(
    id: NodeId,
    x_dim: usize,
    y_dim: usize,
    k: usize,
    kp: usize,
    data: &Dataset,
    rng: &mut ChaCha8Rng,
) -> Result<LeafParams> {
    // Concatenate observed rows, remembering sequence boundaries so lag-1
    // pairs never span two sequences.
    let mut rows: Vec<(usize, usize, DVector<f64>)> = Vec::new();
    for (s, obs) in data.sequences.iter().enumerate() {
        let y = obs.y.get(&id).ok_or_else(|| DstError::ShapeMismatch {
            node: id,
            what: "dataset missing this leaf".into(),
        })?;
        for (t, v) in y.iter().enumerate() {
            if obs.is_observed(id, t) {
                rows.push((s, t, v.clone()));
            }
        }
    }
    if rows.len() < k {
        return Err(DstError::DegenerateRegression {
            node: id,
            subset: 0,
            what: format!("only {} observed steps for {} switch states", rows.len(), k),
        });
    }

    let n = rows.len() as f64;
    let mean = rows.iter().fold(DVector::zeros(y_dim), |a, (_, _, v)| a + v) / n;
    let scatter = rows.iter().fold(DMatrix::zeros(y_dim, y_dim), |a, (_, _, v)| {
        let d = v - &mean;
        a + &d * d.transpose()
    }) / n;
    let data_var = (scatter.trace() / y_dim as f64).max(1e-12);
    let floor = (1e-6 * data_var).max(1e-10);

    // Principal-direction projection; the proxy reduces to y itself when
    // x_dim == y_dim.
    let projection = if x_dim == y_dim {
        DMatrix::identity(y_dim, x_dim)
    } else if x_dim < y_dim {
        let eig = symmetrize(&scatter).symmetric_eigen();
        let mut idx: Vec<usize> = (0..y_dim).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
        DMatrix::from_fn(y_dim, x_dim, |i, j| eig.eigenvectors[(i, idx[j])])
    } else {
        return Err(DstError::DegenerateRegression {
            node: id,
            subset: 0,
            what: "x_dim > y_dim not supported by moment initialization".into(),
        });
    };

    let proxy: Vec<(usize, usize, DVector<f64>)> = rows
        .iter()
        .map(|(s, t, v)| (*s, *t, projection.transpose() * v))
        .collect();

    let mut dynamics = Vec::with_capacity(k);
    let mut dynamics_cov = Vec::with_capacity(k);
    let mut init_mean = Vec::with_capacity(k);
    let mut init_cov = Vec::with_capacity(k);
    let chunk = proxy.len() / k;
    for j in 0..k {
        let start = j * chunk;
        let end = if j == k - 1 { proxy.len() } else { start + chunk };
        let subset = &proxy[start..end];
        if subset.len() < x_dim + 1 {
            return Err(DstError::DegenerateRegression {
                node: id,
                subset: j,
                what: format!("subset has {} steps, need at least {}", subset.len(), x_dim + 1),
            });
        }
        let sn = subset.len() as f64;
        let smean = subset.iter().fold(DVector::zeros(x_dim), |a, (_, _, v)| a + v) / sn;
        let scov = subset.iter().fold(DMatrix::zeros(x_dim, x_dim), |a, (_, _, v)| {
            let d = v - &smean;
            a + &d * d.transpose()
        }) / sn;
        if scov.trace() / x_dim as f64 <= 1e-12 * (1.0 + smean.norm_squared()) {
            return Err(DstError::DegenerateRegression {
                node: id,
                subset: j,
                what: "zero-variance proxy subset".into(),
            });
        }

        let mut gram = DMatrix::zeros(x_dim, x_dim);
        let mut cross = DMatrix::zeros(x_dim, x_dim);
        let mut pairs = Vec::new();
        for w in subset.windows(2) {
            let (s0, t0, ref x0) = w[0];
            let (s1, t1, ref x1) = w[1];
            if s0 == s1 && t1 == t0 + 1 {
                gram += x0 * x0.transpose();
                cross += x1 * x0.transpose();
                pairs.push((x0.clone(), x1.clone()));
            }
        }
        if pairs.len() < x_dim {
            return Err(DstError::DegenerateRegression {
                node: id,
                subset: j,
                what: "too few contiguous lag-1 pairs".into(),
            });
        }
        let gram_inv = spd_cholesky(&gram)
            .map(|c| c.inverse())
            .ok_or(DstError::DegenerateRegression {
                node: id,
                subset: j,
                what: "singular lag-1 normal matrix".into(),
            })?;
        let a = &cross * gram_inv;
        let resid = pairs.iter().fold(DMatrix::zeros(x_dim, x_dim), |acc, (x0, x1)| {
            let r = x1 - &a * x0;
            acc + &r * r.transpose()
        }) / pairs.len() as f64;
        dynamics.push(a);
        dynamics_cov.push(eigen_floor(&resid, floor));
        init_mean.push(smean);
        init_cov.push(eigen_floor(&scov, floor));
    }

    // Emission residuals of the projection; floored so R stays positive
    // definite even when the proxy reproduces y exactly.
    let emission = projection.clone();
    let resid = rows
        .iter()
        .zip(&proxy)
        .fold(DMatrix::zeros(y_dim, y_dim), |acc, ((_, _, y), (_, _, x))| {
            let r = y - &emission * x;
            acc + &r * r.transpose()
        })
        / n;
    let emission_cov = eigen_floor(&resid, floor);

    let jittered_table = |rng: &mut ChaCha8Rng, rows_n: usize, cols: usize| {
        let mut m = DMatrix::from_fn(rows_n, cols, |_, _| rng.gen_range(-0.05..=0.05f64).exp());
        for c in 0..cols {
            let sum: f64 = m.column(c).iter().sum();
            for r in 0..rows_n {
                m[(r, c)] /= sum;
            }
        }
        m
    };

    Ok(LeafParams {
        switch_init: jittered_table(rng, k, kp),
        switch_trans: (0..kp).map(|_| jittered_table(rng, k, k)).collect(),
        init_mean,
        init_cov,
        dynamics,
        dynamics_cov,
        emission,
        emission_cov,
    })
}

/// Closed-form M-step: maximizers of the expected complete-data
/// log-likelihood summed over sequences. Switch states with total weight
/// below 1e-8 keep their previous continuous parameters; every re-estimated
/// covariance is symmetrized and eigenvalue-floored.
pub fn m_step(
    model: &Model,
    states: &[VariationalState],
    data: &Dataset,
    floor: f64,
) -> Result<Model> {
    assert_eq!(states.len(), data.sequences.len());
    let mut new_params = Vec::with_capacity(model.topology.len());

    for (id, spec) in model.topology.nodes() {
        let k = spec.num_switch_states;
        let kp = model.topology.parent_cardinality(id);

        // Discrete tables, shared between aggregators and leaf switches.
        let mut init_acc = DMatrix::zeros(k, kp);
        let mut trans_acc = vec![DMatrix::zeros(k, k); kp];
        for (state, obs) in states.iter().zip(&data.sequences) {
            let horizon = obs.horizon();
            let stats = &state.discrete[&id].stats;
            let parent: Vec<DVector<f64>> = match model.topology.parent(id) {
                Some(p) => state.discrete[&p].stats.singleton.clone(),
                None => vec![DVector::from_element(1, 1.0); horizon + 1],
            };
            for j in 0..k {
                for l in 0..kp {
                    init_acc[(j, l)] += stats.singleton[0][j] * parent[0][l];
                }
            }
            for t in 1..=horizon {
                let pair = stats.pairwise_at(t);
                for l in 0..kp {
                    let pl = parent[t][l];
                    if pl == 0.0 {
                        continue;
                    }
                    for j in 0..k {
                        for kprev in 0..k {
                            trans_acc[l][(j, kprev)] += pair[(j, kprev)] * pl;
                        }
                    }
                }
            }
        }
        let (old_init, old_trans) = match &model.params[id.0] {
            NodeParams::Aggregator(p) => (&p.init, &p.trans),
            NodeParams::Leaf(p) => (&p.switch_init, &p.switch_trans),
        };
        let init = normalize_columns(&init_acc, old_init);
        let trans: Vec<DMatrix<f64>> = trans_acc
            .iter()
            .zip(old_trans)
            .map(|(acc, old)| normalize_columns(acc, old))
            .collect();

        match spec.kind {
            NodeKind::Aggregator => {
                new_params.push(NodeParams::Aggregator(AggregatorParams { init, trans }));
            }
            NodeKind::Leaf => {
                let old = model.leaf_params(id);
                let d = spec.x_dim;
                let e = spec.y_dim;

                let mut dynamics = Vec::with_capacity(k);
                let mut dynamics_cov = Vec::with_capacity(k);
                let mut init_mean = Vec::with_capacity(k);
                let mut init_cov = Vec::with_capacity(k);
                for j in 0..k {
                    let mut w_dyn = 0.0;
                    let mut gram = DMatrix::zeros(d, d);
                    let mut cross_acc = DMatrix::zeros(d, d);
                    let mut second_acc = DMatrix::zeros(d, d);
                    let mut w0 = 0.0;
                    let mut mean0_acc = DVector::zeros(d);
                    let mut second0_acc = DMatrix::zeros(d, d);
                    for (state, obs) in states.iter().zip(&data.sequences) {
                        let horizon = obs.horizon();
                        let sw = &state.discrete[&id].stats.singleton;
                        let cs = &state.continuous[&id].stats;
                        for t in 1..=horizon {
                            let w = sw[t][j];
                            w_dyn += w;
                            gram += &cs.second[t - 1] * w;
                            cross_acc += cs.cross_at(t) * w;
                            second_acc += &cs.second[t] * w;
                        }
                        let w = sw[0][j];
                        w0 += w;
                        mean0_acc += &cs.mean[0] * w;
                        second0_acc += &cs.second[0] * w;
                    }

                    if w_dyn < 1e-8 {
                        dynamics.push(old.dynamics[j].clone());
                        dynamics_cov.push(old.dynamics_cov[j].clone());
                    } else {
                        let gram_inv = spd_cholesky(&gram).map(|c| c.inverse()).ok_or(
                            DstError::Invalid(format!(
                                "singular regression normal matrix for leaf {} state {}",
                                id, j
                            )),
                        )?;
                        let a = &cross_acc * gram_inv;
                        let q = (&second_acc - &a * cross_acc.transpose()
                            - &cross_acc * a.transpose()
                            + &a * &gram * a.transpose())
                            / w_dyn;
                        dynamics.push(a);
                        dynamics_cov.push(eigen_floor(&q, floor));
                    }

                    if w0 < 1e-8 {
                        init_mean.push(old.init_mean[j].clone());
                        init_cov.push(old.init_cov[j].clone());
                    } else {
                        let mu = &mean0_acc / w0;
                        let q0 = (&second0_acc - &mean0_acc * mu.transpose()
                            - &mu * mean0_acc.transpose()
                            + &mu * mu.transpose() * w0)
                            / w0;
                        init_mean.push(mu);
                        init_cov.push(eigen_floor(&q0, floor));
                    }
                }

                // Emission map over observed steps of all sequences.
                let mut ym_acc = DMatrix::zeros(e, d);
                let mut second_obs = DMatrix::zeros(d, d);
                let mut n_obs = 0.0;
                for (state, obs) in states.iter().zip(&data.sequences) {
                    let cs = &state.continuous[&id].stats;
                    let y = &obs.y[&id];
                    for t in 0..=obs.horizon() {
                        if obs.is_observed(id, t) {
                            ym_acc += &y[t] * cs.mean[t].transpose();
                            second_obs += &cs.second[t];
                            n_obs += 1.0;
                        }
                    }
                }
                let (emission, emission_cov) = if n_obs < 1.0 {
                    (old.emission.clone(), old.emission_cov.clone())
                } else {
                    let sec_inv = spd_cholesky(&second_obs).map(|c| c.inverse()).ok_or(
                        DstError::Invalid(format!(
                            "singular emission normal matrix for leaf {}",
                            id
                        )),
                    )?;
                    let c = &ym_acc * sec_inv;
                    let mut r = DMatrix::zeros(e, e);
                    for (state, obs) in states.iter().zip(&data.sequences) {
                        let cs = &state.continuous[&id].stats;
                        let y = &obs.y[&id];
                        for t in 0..=obs.horizon() {
                            if obs.is_observed(id, t) {
                                let cm = &c * &cs.mean[t];
                                r += &y[t] * y[t].transpose()
                                    - &cm * y[t].transpose()
                                    - &y[t] * cm.transpose()
                                    + &c * &cs.second[t] * c.transpose();
                            }
                        }
                    }
                    (c, eigen_floor(&(r / n_obs), floor))
                };

                new_params.push(NodeParams::Leaf(LeafParams {
                    switch_init: init,
                    switch_trans: trans,
                    init_mean,
                    init_cov,
                    dynamics,
                    dynamics_cov,
                    emission,
                    emission_cov,
                }));
            }
        }
    }

    Ok(Model {
        topology: model.topology.clone(),
        params: new_params,
    })
}

/// Normalizes each column of `acc`; columns with no mass fall back to the
/// previous table.
fn normalize_columns(acc: &DMatrix<f64>, old: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = acc.clone();
    for c in 0..out.ncols() {
        let sum: f64 = out.column(c).iter().sum();
        if sum > 0.0 {
            for r in 0..out.nrows() {
                out[(r, c)] /= sum;
            }
        } else {
            for r in 0..out.nrows() {
                out[(r, c)] = old[(r, c)];
            }
        }
    }
    out
}

/// Extrapolated parameter step: `prev + eta * (proposed - prev)` in an
/// unconstrained reparameterization. Multinomial tables blend in the log
/// domain and renormalize; matrices blend linearly; covariances blend
/// linearly then get eigenvalue-floored. The caller accepts the candidate
/// only if its bound beats the plain proposal.
pub fn overrelaxed_update(prev: &Model, proposed: &Model, eta: f64, floor: f64) -> Model {
    let blend_table = |a: &DMatrix<f64>, b: &DMatrix<f64>| {
        let mut out = DMatrix::zeros(a.nrows(), a.ncols());
        for c in 0..a.ncols() {
            let mut col_sum = 0.0;
            for r in 0..a.nrows() {
                let la = a[(r, c)].ln();
                let lb = b[(r, c)].ln();
                let v = if la == f64::NEG_INFINITY || lb == f64::NEG_INFINITY {
                    // zero stays zero when proposed is zero; otherwise keep
                    // the proposed mass
                    if eta >= 1.0 { b[(r, c)] } else { a[(r, c)] }
                } else {
                    (la + eta * (lb - la)).exp()
                };
                out[(r, c)] = v;
                col_sum += v;
            }
            if col_sum > 0.0 {
                for r in 0..a.nrows() {
                    out[(r, c)] /= col_sum;
                }
            } else {
                for r in 0..a.nrows() {
                    out[(r, c)] = b[(r, c)];
                }
            }
        }
        out
    };
    let blend_mat = |a: &DMatrix<f64>, b: &DMatrix<f64>| a + (b - a) * eta;
    let blend_vec = |a: &DVector<f64>, b: &DVector<f64>| a + (b - a) * eta;
    let blend_cov = |a: &DMatrix<f64>, b: &DMatrix<f64>| eigen_floor(&(a + (b - a) * eta), floor);

    let params = prev
        .params
        .iter()
        .zip(&proposed.params)
        .map(|(pa, pb)| match (pa, pb) {
            (NodeParams::Aggregator(a), NodeParams::Aggregator(b)) => {
                NodeParams::Aggregator(AggregatorParams {
                    init: blend_table(&a.init, &b.init),
                    trans: a
                        .trans
                        .iter()
                        .zip(&b.trans)
                        .map(|(x, y)| blend_table(x, y))
                        .collect(),
                })
            }
            (NodeParams::Leaf(a), NodeParams::Leaf(b)) => NodeParams::Leaf(LeafParams {
                switch_init: blend_table(&a.switch_init, &b.switch_init),
                switch_trans: a
                    .switch_trans
                    .iter()
                    .zip(&b.switch_trans)
                    .map(|(x, y)| blend_table(x, y))
                    .collect(),
                init_mean: a
                    .init_mean
                    .iter()
                    .zip(&b.init_mean)
                    .map(|(x, y)| blend_vec(x, y))
                    .collect(),
                init_cov: a
                    .init_cov
                    .iter()
                    .zip(&b.init_cov)
                    .map(|(x, y)| blend_cov(x, y))
                    .collect(),
                dynamics: a
                    .dynamics
                    .iter()
                    .zip(&b.dynamics)
                    .map(|(x, y)| blend_mat(x, y))
                    .collect(),
                dynamics_cov: a
                    .dynamics_cov
                    .iter()
                    .zip(&b.dynamics_cov)
                    .map(|(x, y)| blend_cov(x, y))
                    .collect(),
                emission: blend_mat(&a.emission, &b.emission),
                emission_cov: blend_cov(&a.emission_cov, &b.emission_cov),
            }),
            _ => unreachable!("topologies match"),
        })
        .collect();

    Model {
        topology: prev.topology.clone(),
        params,
    }
}

/// Variational EM: interleaves warm-started per-sequence E-steps with
/// closed-form M-steps until the summed bound stops improving. With
/// `overrelax`, each M-step proposal is extrapolated and the candidate kept
/// only if its bound beats the plain proposal.
pub fn em_fit(model: &Model, data: &Dataset, config: &EmConfig) -> Result<(Model, FitReport)> {
    let mut model = model.clone();
    let mut states: Vec<Option<VariationalState>> = vec![None; data.sequences.len()];
    let mut bound_per_iter = Vec::new();
    let mut eta_trace = Vec::new();
    let mut eta = config.eta_init;
    let mut converged = false;
    let mut prev_bound = f64::NEG_INFINITY;

    let e_step = |model: &Model,
                  states: &mut Vec<Option<VariationalState>>,
                  config: &EmConfig|
     -> Result<f64> {
        let mut total = 0.0;
        for (i, obs) in data.sequences.iter().enumerate() {
            let (state, _) = match states[i].take() {
                Some(s) => fit_variational_from(model, obs, s, config.e_tol, config.max_sweeps)?,
                None => fit_variational(
                    model,
                    obs,
                    config.e_tol,
                    config.max_sweeps,
                    config.seed.wrapping_add(i as u64),
                )?,
            };
            total += state.bound;
            states[i] = Some(state);
        }
        Ok(total)
    };

    let mut iters_run = 0;
    for _ in 0..config.max_em_iters {
        let bound = e_step(&model, &mut states, config)?;
        bound_per_iter.push(bound);
        iters_run += 1;

        if bound - prev_bound < config.em_tol * (1.0 + prev_bound.abs()) && iters_run > 1 {
            converged = true;
            if config.overrelax {
                eta_trace.push(eta);
            }
            break;
        }
        prev_bound = bound;

        let owned: Vec<VariationalState> = states.iter().map(|s| s.clone().unwrap()).collect();
        let proposed = m_step(&model, &owned, data, config.covariance_floor)?;

        if config.overrelax && eta > 1.0 + 1e-12 {
            let candidate = overrelaxed_update(&model, &proposed, eta, config.covariance_floor);
            let mut prop_states: Vec<Option<VariationalState>> =
                states.iter().cloned().collect();
            let prop_bound = e_step(&proposed, &mut prop_states, config)?;
            let mut cand_states: Vec<Option<VariationalState>> =
                states.iter().cloned().collect();
            match e_step(&candidate, &mut cand_states, config) {
                Ok(cand_bound) if cand_bound >= prop_bound => {
                    model = candidate;
                    states = cand_states;
                    eta *= config.eta_grow;
                }
                _ => {
                    // fall back to the plain proposal and shrink the step
                    model = proposed;
                    states = prop_states;
                    eta = (eta * config.eta_shrink).max(1.0);
                }
            }
        } else {
            model = proposed;
            if config.overrelax {
                eta *= config.eta_grow;
            }
        }
        if config.overrelax {
            eta_trace.push(eta);
        }
    }

    Ok((
        model,
        FitReport {
            bound_per_iter,
            iters_run,
            converged,
            eta_trace,
        },
    ))
}

/// Bound-based classification: fully re-fits Q under each model and picks
/// the largest converged bound; ties break toward the lowest model index.
pub fn classify(models: &[Model], obs: &ObservationSet, config: &EmConfig) -> ClassifyOutcome {
    let mut scores = Vec::with_capacity(models.len());
    let mut errors = Vec::with_capacity(models.len());
    for model in models {
        match fit_variational(model, obs, config.e_tol, config.max_sweeps, config.seed) {
            Ok((state, _)) => {
                scores.push(state.bound);
                errors.push(None);
            }
            Err(e) => {
                scores.push(f64::NEG_INFINITY);
                errors.push(Some(e.to_string()));
            }
        }
    }
    let mut label = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[label] {
            label = i;
        }
    }
    let tie = scores
        .iter()
        .enumerate()
        .any(|(i, &s)| i != label && s == scores[label]);
    ClassifyOutcome {
        label,
        scores,
        errors,
        tie,
    }
}

/// Evaluates the summed bound of a fixed model on a dataset (fresh E-steps).
pub fn eval_bounds(model: &Model, data: &Dataset, config: &EmConfig) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(data.sequences.len());
    for (i, obs) in data.sequences.iter().enumerate() {
        let (state, _) = fit_variational(
            model,
            obs,
            config.e_tol,
            config.max_sweeps,
            config.seed.wrapping_add(i as u64),
        )?;
        out.push(state.bound);
    }
    Ok(out)
}
