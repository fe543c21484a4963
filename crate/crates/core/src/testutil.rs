//! Seeded random model generators used by the test suites and the examples.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::{AggregatorParams, LeafParams, Model, NodeParams};
use crate::topology::{NodeId, NodeSpec, Topology};

/// Random symmetric positive definite matrix with a bounded condition number.
pub fn random_spd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    &m * m.transpose() + DMatrix::identity(d, d) * rng.gen_range(0.3..1.0)
}

/// Random matrix rescaled to spectral radius below `radius`.
pub fn random_stable(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> DMatrix<f64> {
    let m = DMatrix::from_fn(d, d, |_, _| rng.gen_range(-1.0..1.0));
    let norm = m.norm();
    if norm > 0.0 {
        m * (radius / norm)
    } else {
        m
    }
}

/// Random column-stochastic K x Kp table.
pub fn random_table(rng: &mut ChaCha8Rng, k: usize, kp: usize) -> DMatrix<f64> {
    let mut m = DMatrix::from_fn(k, kp, |_, _| rng.gen_range(0.1..1.0));
    for col in 0..kp {
        let sum: f64 = m.column(col).iter().sum();
        for row in 0..k {
            m[(row, col)] /= sum;
        }
    }
    m
}

fn random_leaf_params(
    rng: &mut ChaCha8Rng,
    k: usize,
    kp: usize,
    x_dim: usize,
    y_dim: usize,
) -> LeafParams {
    LeafParams {
        switch_init: random_table(rng, k, kp),
        switch_trans: (0..kp).map(|_| random_table(rng, k, k)).collect(),
        init_mean: (0..k)
            .map(|_| DVector::from_fn(x_dim, |_, _| rng.gen_range(-1.0..1.0)))
            .collect(),
        init_cov: (0..k).map(|_| random_spd(rng, x_dim)).collect(),
        dynamics: (0..k).map(|_| random_stable(rng, x_dim, 0.95)).collect(),
        dynamics_cov: (0..k).map(|_| random_spd(rng, x_dim)).collect(),
        emission: DMatrix::from_fn(y_dim, x_dim, |_, _| rng.gen_range(-1.0..1.0)),
        emission_cov: random_spd(rng, y_dim),
    }
}

/// Deterministic single-leaf model: uniform switch tables, zero means,
/// identity covariances, A = 0.5 I, C with ones on the diagonal.
pub fn single_leaf_model(k: usize, x_dim: usize, y_dim: usize) -> Model {
    let topology = Topology::new(vec![NodeSpec::leaf(None, k, x_dim, y_dim)]);
    let uniform = 1.0 / k as f64;
    let params = LeafParams {
        switch_init: DMatrix::from_element(k, 1, uniform),
        switch_trans: vec![DMatrix::from_element(k, k, uniform)],
        init_mean: vec![DVector::zeros(x_dim); k],
        init_cov: vec![DMatrix::identity(x_dim, x_dim); k],
        dynamics: vec![DMatrix::identity(x_dim, x_dim) * 0.5; k],
        dynamics_cov: vec![DMatrix::identity(x_dim, x_dim); k],
        emission: DMatrix::from_fn(y_dim, x_dim, |i, j| if i == j { 1.0 } else { 0.0 }),
        emission_cov: DMatrix::identity(y_dim, y_dim),
    };
    Model {
        topology,
        params: vec![NodeParams::Leaf(params)],
    }
}

/// Random single-leaf model with one switch state: exactly a Kalman filter.
pub fn random_single_leaf_kalman_model(seed: u64, x_dim: usize, y_dim: usize) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e3779b9).wrapping_add(1));
    let topology = Topology::new(vec![NodeSpec::leaf(None, 1, x_dim, y_dim)]);
    let params = random_leaf_params(&mut rng, 1, 1, x_dim, y_dim);
    Model {
        topology,
        params: vec![NodeParams::Leaf(params)],
    }
}

/// Random fixed-shape model: one aggregator (K=2) over two scalar leaves
/// (K=2, x_dim = y_dim = 1).
pub fn random_tiny_model(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x51ed2701).wrapping_add(7));
    let topology = Topology::new(vec![
        NodeSpec::aggregator(None, 2),
        NodeSpec::leaf(Some(NodeId(0)), 2, 1, 1),
        NodeSpec::leaf(Some(NodeId(0)), 2, 1, 1),
    ]);
    let params = vec![
        NodeParams::Aggregator(AggregatorParams {
            init: random_table(&mut rng, 2, 1),
            trans: vec![random_table(&mut rng, 2, 2)],
        }),
        NodeParams::Leaf(random_leaf_params(&mut rng, 2, 2, 1, 1)),
        NodeParams::Leaf(random_leaf_params(&mut rng, 2, 2, 1, 1)),
    ];
    Model { topology, params }
}

/// Random tiny DST with a randomly chosen shape: at most 3 chains, K <= 2,
/// scalar leaves. Small enough for the exact enumeration oracle.
pub fn random_tiny_dst(seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0xab12cd34).wrapping_add(3));
    let shape = rng.gen_range(0..3u32);
    let (topology, chains): (Topology, Vec<(usize, usize)>) = match shape {
        // single SLDS leaf
        0 => {
            let k = rng.gen_range(1..=2);
            (
                Topology::new(vec![NodeSpec::leaf(None, k, 1, 1)]),
                vec![(k, 1)],
            )
        }
        // aggregator over one leaf
        1 => {
            let ka = rng.gen_range(1..=2);
            let kl = rng.gen_range(1..=2);
            (
                Topology::new(vec![
                    NodeSpec::aggregator(None, ka),
                    NodeSpec::leaf(Some(NodeId(0)), kl, 1, 1),
                ]),
                vec![(ka, 1), (kl, ka)],
            )
        }
        // aggregator over two leaves
        _ => {
            let ka = rng.gen_range(1..=2);
            let k1 = rng.gen_range(1..=2);
            let k2 = rng.gen_range(1..=2);
            (
                Topology::new(vec![
                    NodeSpec::aggregator(None, ka),
                    NodeSpec::leaf(Some(NodeId(0)), k1, 1, 1),
                    NodeSpec::leaf(Some(NodeId(0)), k2, 1, 1),
                ]),
                vec![(ka, 1), (k1, ka), (k2, ka)],
            )
        }
    };
    let params = topology
        .nodes()
        .map(|(id, spec)| {
            let (k, kp) = chains[id.0];
            match spec.kind {
                crate::topology::NodeKind::Aggregator => NodeParams::Aggregator(AggregatorParams {
                    init: random_table(&mut rng, k, kp),
                    trans: (0..kp).map(|_| random_table(&mut rng, k, k)).collect(),
                }),
                crate::topology::NodeKind::Leaf => {
                    NodeParams::Leaf(random_leaf_params(&mut rng, k, kp, 1, 1))
                }
            }
        })
        .collect();
    Model { topology, params }
}
