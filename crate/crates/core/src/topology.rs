//! Tree structure of a dynamical systems tree: aggregator and leaf nodes,
//! parent/child relations, state cardinalities and dimensions.

use serde::{Deserialize, Serialize};
use std::fmt;

/// Index of a node within a topology. Ids are contiguous `0..N`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Aggregator,
    Leaf,
}

/// Static description of one node in the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSpec {
    pub kind: NodeKind,
    pub parent: Option<NodeId>,
    /// Cardinality of the discrete state chain.
    pub num_switch_states: usize,
    /// Continuous state dimension (leaves only).
    pub x_dim: usize,
    /// Emission dimension (leaves only).
    pub y_dim: usize,
}

impl NodeSpec {
    pub fn aggregator(parent: Option<NodeId>, k: usize) -> Self {
        NodeSpec {
            kind: NodeKind::Aggregator,
            parent,
            num_switch_states: k,
            x_dim: 0,
            y_dim: 0,
        }
    }

    pub fn leaf(parent: Option<NodeId>, k: usize, x_dim: usize, y_dim: usize) -> Self {
        NodeSpec {
            kind: NodeKind::Leaf,
            parent,
            num_switch_states: k,
            x_dim,
            y_dim,
        }
    }
}

/// A single violated invariant found by [`Topology::validate`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub node: Option<NodeId>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(n) => write!(f, "node {}: {}", n, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

pub type ValidationReport = Vec<Violation>;

/// The tree of aggregator and leaf nodes. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    nodes: Vec<NodeSpec>,
    children: Vec<Vec<NodeId>>,
}

impl Topology {
    /// Builds a topology from an ordered node list. Child lists follow
    /// insertion order. Does not validate; call [`Topology::validate`].
    pub fn new(nodes: Vec<NodeSpec>) -> Self {
        let mut children = vec![Vec::new(); nodes.len()];
        for (i, n) in nodes.iter().enumerate() {
            if let Some(p) = n.parent {
                if p.0 < nodes.len() {
                    children[p.0].push(NodeId(i));
                }
            }
        }
        Topology { nodes, children }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> impl Iterator<Item = (NodeId, &NodeSpec)> {
        self.nodes.iter().enumerate().map(|(i, n)| (NodeId(i), n))
    }

    pub fn children(&self, id: NodeId) -> &[NodeId] {
        &self.children[id.0]
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes[id.0].parent
    }

    /// Cardinality of a node's parent chain; 1 for the root, which is
    /// modeled as conditioning on a constant single-state chain.
    pub fn parent_cardinality(&self, id: NodeId) -> usize {
        match self.nodes[id.0].parent {
            Some(p) => self.nodes[p.0].num_switch_states,
            None => 1,
        }
    }

    pub fn root(&self) -> Option<NodeId> {
        self.nodes
            .iter()
            .position(|n| n.parent.is_none())
            .map(NodeId)
    }

    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.nodes()
            .filter(|(_, n)| n.kind == NodeKind::Leaf)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn aggregator_ids(&self) -> Vec<NodeId> {
        self.nodes()
            .filter(|(_, n)| n.kind == NodeKind::Aggregator)
            .map(|(i, _)| i)
            .collect()
    }

    /// Depth-first preorder from the root, children in insertion order.
    /// Sweeps over the tree use this order for reproducibility.
    pub fn dfs_order(&self) -> Vec<NodeId> {
        let mut out = Vec::with_capacity(self.nodes.len());
        let mut stack: Vec<NodeId> = self.root().into_iter().collect();
        while let Some(id) = stack.pop() {
            out.push(id);
            for &c in self.children(id).iter().rev() {
                stack.push(c);
            }
        }
        out
    }

    pub fn depth(&self, id: NodeId) -> usize {
        let mut d = 0;
        let mut cur = id;
        while let Some(p) = self.parent(cur) {
            d += 1;
            cur = p;
        }
        d
    }

    /// Checks every structural invariant, returning one entry per violation.
    /// An empty report means the topology is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut report = Vec::new();
        if self.nodes.is_empty() {
            report.push(Violation {
                node: None,
                message: "topology has no nodes".into(),
            });
            return report;
        }

        let roots: Vec<NodeId> = self
            .nodes()
            .filter(|(_, n)| n.parent.is_none())
            .map(|(i, _)| i)
            .collect();
        if roots.len() != 1 {
            report.push(Violation {
                node: None,
                message: format!("expected exactly one root, found {}", roots.len()),
            });
        }
        if roots.len() == 1 && self.nodes.len() > 1 {
            let root = roots[0];
            if self.nodes[root.0].kind != NodeKind::Aggregator {
                report.push(Violation {
                    node: Some(root),
                    message: "root of a multi-node tree must be an aggregator".into(),
                });
            }
        }

        for (id, n) in self.nodes() {
            if let Some(p) = n.parent {
                if p.0 >= self.nodes.len() {
                    report.push(Violation {
                        node: Some(id),
                        message: format!("parent {} out of range", p),
                    });
                } else if self.nodes[p.0].kind != NodeKind::Aggregator {
                    report.push(Violation {
                        node: Some(id),
                        message: format!("parent {} is not an aggregator", p),
                    });
                }
            }
            if n.num_switch_states == 0 {
                report.push(Violation {
                    node: Some(id),
                    message: "num_switch_states must be positive".into(),
                });
            }
            match n.kind {
                NodeKind::Aggregator => {
                    if self.children(id).is_empty() {
                        report.push(Violation {
                            node: Some(id),
                            message: "aggregator has no children".into(),
                        });
                    }
                    if n.x_dim != 0 || n.y_dim != 0 {
                        report.push(Violation {
                            node: Some(id),
                            message: "aggregator carries x_dim/y_dim".into(),
                        });
                    }
                }
                NodeKind::Leaf => {
                    if !self.children(id).is_empty() {
                        report.push(Violation {
                            node: Some(id),
                            message: "leaf has children".into(),
                        });
                    }
                    if n.x_dim == 0 || n.y_dim == 0 {
                        report.push(Violation {
                            node: Some(id),
                            message: "leaf must have x_dim >= 1 and y_dim >= 1".into(),
                        });
                    }
                }
            }
        }

        // Cycle / connectivity check: walk up from every node.
        for (id, _) in self.nodes() {
            let mut seen = vec![false; self.nodes.len()];
            let mut cur = id;
            loop {
                if seen[cur.0] {
                    report.push(Violation {
                        node: Some(id),
                        message: "parent chain contains a cycle".into(),
                    });
                    break;
                }
                seen[cur.0] = true;
                match self.parent(cur) {
                    Some(p) if p.0 < self.nodes.len() => cur = p,
                    _ => break,
                }
            }
        }

        report
    }
}
