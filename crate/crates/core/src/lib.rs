//! Dynamical systems trees: multiple interacting time series coupled through
//! a tree of aggregating hidden Markov chains over switching-linear-dynamical
//! leaves.
//!
//! The crate provides the generative model ([`model`]), structured mean-field
//! inference with an evidence bound ([`inference`]), variational EM learning
//! and bound-based classification ([`learning`]), and exact small-instance
//! reference computations ([`oracle`]).

pub mod error;
pub mod format;
pub mod inference;
pub mod learning;
pub mod linalg;
pub mod model;
pub mod oracle;
pub mod testutil;
pub mod topology;

pub use error::{DstError, Result};
pub use model::{Model, ObservationSet};
pub use topology::{NodeId, Topology};
