//! JSON document formats for models, topologies and observation data.
//!
//! Model file: `{"topology": [...node records...], "params": {"<id>": {...}}}`.
//! A topology file is the same document with `params` omitted. Data file:
//! `{"T": int, "leaves": {"<leaf id>": {"y": [[...]...], "observed": [...]}}}`;
//! a `null` row in `y` marks a missing step, as does `false` in `observed`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{DstError, Result};
use crate::model::{AggregatorParams, LeafParams, Model, NodeParams, ObservationSet};
use crate::topology::{NodeId, NodeKind, NodeSpec, Topology};

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: usize,
    kind: String,
    parent: Option<usize>,
    k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x_dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    y_dim: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(untagged)]
enum ParamsRecord {
    Aggregator {
        phi0: Vec<Vec<f64>>,
        /// Indexed [j][k][l]: current, previous, parent state.
        phi: Vec<Vec<Vec<f64>>>,
    },
    Leaf {
        psi0: Vec<Vec<f64>>,
        psi: Vec<Vec<Vec<f64>>>,
        mu0: Vec<Vec<f64>>,
        q0: Vec<Vec<Vec<f64>>>,
        #[serde(rename = "A")]
        a: Vec<Vec<Vec<f64>>>,
        #[serde(rename = "Q")]
        q: Vec<Vec<Vec<f64>>>,
        #[serde(rename = "C")]
        c: Vec<Vec<f64>>,
        #[serde(rename = "R")]
        r: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    topology: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<BTreeMap<String, ParamsRecord>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LeafDataRecord {
    y: Vec<Option<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observed: Option<Vec<bool>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataDocument {
    #[serde(rename = "T")]
    horizon: usize,
    leaves: BTreeMap<String, LeafDataRecord>,
}

fn doc_err(path: &str, what: impl Into<String>) -> DstError {
    DstError::Document {
        path: path.into(),
        what: what.into(),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], path: &str) -> Result<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(doc_err(path, "empty matrix"));
    }
    let ncols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        if r.len() != ncols {
            return Err(doc_err(path, format!("ragged row {}", i)));
        }
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

/// [j][k][l] nested table -> per-parent-state matrices (index l, entry (j,k)).
fn trans_from_nested(t: &[Vec<Vec<f64>>], path: &str) -> Result<Vec<DMatrix<f64>>> {
    if t.is_empty() || t[0].is_empty() || t[0][0].is_empty() {
        return Err(doc_err(path, "empty table"));
    }
    let (nj, nk, nl) = (t.len(), t[0].len(), t[0][0].len());
    for (j, kj) in t.iter().enumerate() {
        if kj.len() != nk {
            return Err(doc_err(path, format!("ragged slice [{}]", j)));
        }
        for (k, lk) in kj.iter().enumerate() {
            if lk.len() != nl {
                return Err(doc_err(path, format!("ragged slice [{}][{}]", j, k)));
            }
        }
    }
    Ok((0..nl)
        .map(|l| DMatrix::from_fn(nj, nk, |j, k| t[j][k][l]))
        .collect())
}

fn trans_to_nested(tables: &[DMatrix<f64>]) -> Vec<Vec<Vec<f64>>> {
    let (nj, nk) = (tables[0].nrows(), tables[0].ncols());
    (0..nj)
        .map(|j| {
            (0..nk)
                .map(|k| tables.iter().map(|m| m[(j, k)]).collect())
                .collect()
        })
        .collect()
}

fn per_state_matrices(t: &[Vec<Vec<f64>>], path: &str) -> Result<Vec<DMatrix<f64>>> {
    t.iter()
        .enumerate()
        .map(|(j, rows)| matrix_from_rows(rows, &format!("{}[{}]", path, j)))
        .collect()
}

fn topology_from_records(records: &[NodeRecord]) -> Result<Topology> {
    let n = records.len();
    let mut nodes = vec![None; n];
    for rec in records {
        if rec.id >= n {
            return Err(doc_err("topology", format!("node id {} not in 0..{}", rec.id, n)));
        }
        if nodes[rec.id].is_some() {
            return Err(doc_err("topology", format!("duplicate node id {}", rec.id)));
        }
        let kind = match rec.kind.as_str() {
            "aggregator" => NodeKind::Aggregator,
            "leaf" => NodeKind::Leaf,
            other => return Err(doc_err("topology", format!("unknown kind '{}'", other))),
        };
        let spec = match kind {
            NodeKind::Aggregator => NodeSpec::aggregator(rec.parent.map(NodeId), rec.k),
            NodeKind::Leaf => NodeSpec::leaf(
                rec.parent.map(NodeId),
                rec.k,
                rec.x_dim.ok_or_else(|| doc_err("topology", format!("leaf {} missing x_dim", rec.id)))?,
                rec.y_dim.ok_or_else(|| doc_err("topology", format!("leaf {} missing y_dim", rec.id)))?,
            ),
        };
        nodes[rec.id] = Some(spec);
    }
    let nodes: Vec<NodeSpec> = nodes.into_iter().flatten().collect();
    if nodes.len() != n {
        return Err(doc_err("topology", "missing node ids"));
    }
    let topology = Topology::new(nodes);
    let report = topology.validate();
    if let Some(v) = report.first() {
        return Err(DstError::InvalidTopology(v.to_string()));
    }
    Ok(topology)
}

fn topology_to_records(topology: &Topology) -> Vec<NodeRecord> {
    topology
        .nodes()
        .map(|(id, spec)| NodeRecord {
            id: id.0,
            kind: match spec.kind {
                NodeKind::Aggregator => "aggregator".into(),
                NodeKind::Leaf => "leaf".into(),
            },
            parent: spec.parent.map(|p| p.0),
            k: spec.num_switch_states,
            x_dim: (spec.kind == NodeKind::Leaf).then_some(spec.x_dim),
            y_dim: (spec.kind == NodeKind::Leaf).then_some(spec.y_dim),
        })
        .collect()
}

/// Parses a standalone topology document (a model file with `params` omitted
/// also works).
pub fn decode_topology(text: &str) -> Result<Topology> {
    let doc: ModelDocument =
        serde_json::from_str(text).map_err(|e| doc_err("<document>", e.to_string()))?;
    topology_from_records(&doc.topology)
}

/// Parses and fully validates a model document.
pub fn decode_model(text: &str) -> Result<Model> {
    let doc: ModelDocument =
        serde_json::from_str(text).map_err(|e| doc_err("<document>", e.to_string()))?;
    let topology = topology_from_records(&doc.topology)?;
    let params_map = doc
        .params
        .ok_or_else(|| doc_err("params", "missing params section"))?;

    let mut params = Vec::with_capacity(topology.len());
    for (id, spec) in topology.nodes() {
        let rec = params_map
            .get(&id.0.to_string())
            .ok_or_else(|| doc_err(&format!("params.{}", id), "missing node params"))?;
        let p = match (rec, spec.kind) {
            (ParamsRecord::Aggregator { phi0, phi }, NodeKind::Aggregator) => {
                NodeParams::Aggregator(AggregatorParams {
                    init: matrix_from_rows(phi0, &format!("params.{}.phi0", id))?,
                    trans: trans_from_nested(phi, &format!("params.{}.phi", id))?,
                })
            }
            (
                ParamsRecord::Leaf {
                    psi0,
                    psi,
                    mu0,
                    q0,
                    a,
                    q,
                    c,
                    r,
                },
                NodeKind::Leaf,
            ) => NodeParams::Leaf(LeafParams {
                switch_init: matrix_from_rows(psi0, &format!("params.{}.psi0", id))?,
                switch_trans: trans_from_nested(psi, &format!("params.{}.psi", id))?,
                init_mean: mu0.iter().map(|v| DVector::from_vec(v.clone())).collect(),
                init_cov: per_state_matrices(q0, &format!("params.{}.q0", id))?,
                dynamics: per_state_matrices(a, &format!("params.{}.A", id))?,
                dynamics_cov: per_state_matrices(q, &format!("params.{}.Q", id))?,
                emission: matrix_from_rows(c, &format!("params.{}.C", id))?,
                emission_cov: matrix_from_rows(r, &format!("params.{}.R", id))?,
            }),
            _ => {
                return Err(doc_err(
                    &format!("params.{}", id),
                    "parameter record kind does not match node kind",
                ))
            }
        };
        params.push(p);
    }

    let model = Model { topology, params };
    model.validate()?;
    Ok(model)
}

/// Serializes a model to a pretty JSON document; full f64 precision.
pub fn encode_model(model: &Model) -> String {
    let mut params = BTreeMap::new();
    for (id, _) in model.topology.nodes() {
        let rec = match &model.params[id.0] {
            NodeParams::Aggregator(p) => ParamsRecord::Aggregator {
                phi0: matrix_to_rows(&p.init),
                phi: trans_to_nested(&p.trans),
            },
            NodeParams::Leaf(p) => ParamsRecord::Leaf {
                psi0: matrix_to_rows(&p.switch_init),
                psi: trans_to_nested(&p.switch_trans),
                mu0: p.init_mean.iter().map(|v| v.iter().copied().collect()).collect(),
                q0: p.init_cov.iter().map(matrix_to_rows).collect(),
                a: p.dynamics.iter().map(matrix_to_rows).collect(),
                q: p.dynamics_cov.iter().map(matrix_to_rows).collect(),
                c: matrix_to_rows(&p.emission),
                r: matrix_to_rows(&p.emission_cov),
            },
        };
        params.insert(id.0.to_string(), rec);
    }
    let doc = ModelDocument {
        topology: topology_to_records(&model.topology),
        params: Some(params),
    };
    serde_json::to_string_pretty(&doc).expect("model document serializes")
}

/// Parses a data document against a topology's leaf set.
pub fn decode_data(text: &str, topology: &Topology) -> Result<ObservationSet> {
    let doc: DataDocument =
        serde_json::from_str(text).map_err(|e| doc_err("<document>", e.to_string()))?;
    let mut y = BTreeMap::new();
    let mut observed = BTreeMap::new();
    for leaf in topology.leaf_ids() {
        let spec = topology.node(leaf);
        let rec = doc
            .leaves
            .get(&leaf.0.to_string())
            .ok_or_else(|| doc_err(&format!("leaves.{}", leaf), "missing leaf data"))?;
        if rec.y.len() != doc.horizon + 1 {
            return Err(doc_err(
                &format!("leaves.{}.y", leaf),
                format!("expected {} rows, found {}", doc.horizon + 1, rec.y.len()),
            ));
        }
        let mut mask = match &rec.observed {
            Some(m) => {
                if m.len() != doc.horizon + 1 {
                    return Err(doc_err(
                        &format!("leaves.{}.observed", leaf),
                        "mask length mismatch",
                    ));
                }
                m.clone()
            }
            None => vec![true; doc.horizon + 1],
        };
        let mut seq = Vec::with_capacity(doc.horizon + 1);
        for (t, row) in rec.y.iter().enumerate() {
            match row {
                Some(v) => {
                    if v.len() != spec.y_dim {
                        return Err(doc_err(
                            &format!("leaves.{}.y[{}]", leaf, t),
                            format!("expected length {}, found {}", spec.y_dim, v.len()),
                        ));
                    }
                    seq.push(DVector::from_vec(v.clone()));
                }
                None => {
                    mask[t] = false;
                    seq.push(DVector::zeros(spec.y_dim));
                }
            }
        }
        y.insert(leaf, seq);
        observed.insert(leaf, mask);
    }
    Ok(ObservationSet { y, observed })
}

pub fn encode_data(obs: &ObservationSet) -> String {
    let horizon = obs.horizon();
    let mut leaves = BTreeMap::new();
    for (id, seq) in &obs.y {
        let mask = &obs.observed[id];
        let rows = seq
            .iter()
            .enumerate()
            .map(|(t, v)| mask[t].then(|| v.iter().copied().collect()))
            .collect();
        leaves.insert(
            id.0.to_string(),
            LeafDataRecord {
                y: rows,
                observed: Some(mask.clone()),
            },
        );
    }
    serde_json::to_string_pretty(&DataDocument { horizon, leaves }).expect("data document serializes")
}
