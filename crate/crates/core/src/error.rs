use thiserror::Error;

use crate::topology::NodeId;

/// Errors produced by model construction, inference and learning.
#[derive(Debug, Error)]
pub enum DstError {
    #[error("shape mismatch at node {node}: {what}")]
    ShapeMismatch { node: NodeId, what: String },

    #[error("malformed document at {path}: {what}")]
    Document { path: String, what: String },

    #[error("table at {path} not normalized: slice sums to {sum}")]
    NotNormalized { path: String, sum: f64 },

    #[error("covariance at {path} is not positive definite")]
    NotPositiveDefinite { path: String },

    #[error("dead chain state in node {node} at t={t}: all potentials vanish for previous state {prev}")]
    DeadChainState { node: NodeId, t: usize, prev: usize },

    #[error("singular precision in continuous update of node {node} at t={t}")]
    SingularPrecision { node: NodeId, t: usize },

    #[error("mean-field monotonicity violated in node {node}: bound dropped from {before} to {after}")]
    MonotonicityViolated { node: NodeId, before: f64, after: f64 },

    #[error("degenerate regression for leaf {node}, subset {subset}: {what}")]
    DegenerateRegression { node: NodeId, subset: usize, what: String },

    #[error("oracle limit exceeded: {what}")]
    OracleLimit { what: String },

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("{0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, DstError>;
