//! Directed edge constraints for a whole network.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::geometry::{EdgeConstraint, Position};

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetworkError {
    #[error("anchor {0} is not a node of the network")]
    BadAnchor(NodeId),
    #[error("edge {from}->{to} references a node outside 0..{node_count}")]
    UnknownNode { from: NodeId, to: NodeId, node_count: usize },
    #[error("edge {from}->{to} has no reverse constraint")]
    MissingReverse { from: NodeId, to: NodeId },
    #[error("self-loop at node {0}")]
    SelfLoop(NodeId),
    #[error("node {0} is not connected to the anchor")]
    Unreachable(NodeId),
}

/// Per-directed-edge constraints of a network with a single anchor.
///
/// The constraint stored under `(from, to)` describes `s_to - s_from` and is
/// built from the measurements taken at `to`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConstraints {
    node_count: usize,
    anchor: NodeId,
    anchor_position: Position,
    edges: BTreeMap<(NodeId, NodeId), EdgeConstraint>,
}

impl NetworkConstraints {
    pub fn new(
        node_count: usize,
        anchor: NodeId,
        anchor_position: Position,
        edges: BTreeMap<(NodeId, NodeId), EdgeConstraint>,
    ) -> Result<Self, NetworkError> {
        if anchor >= node_count {
            return Err(NetworkError::BadAnchor(anchor));
        }
        for &(from, to) in edges.keys() {
            if from >= node_count || to >= node_count {
                return Err(NetworkError::UnknownNode { from, to, node_count });
            }
            if from == to {
                return Err(NetworkError::SelfLoop(from));
            }
            if !edges.contains_key(&(to, from)) {
                return Err(NetworkError::MissingReverse { from, to });
            }
        }
        Ok(Self {
            node_count,
            anchor,
            anchor_position,
            edges,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn anchor(&self) -> NodeId {
        self.anchor
    }

    pub fn anchor_position(&self) -> Position {
        self.anchor_position
    }

    pub fn edges(&self) -> &BTreeMap<(NodeId, NodeId), EdgeConstraint> {
        &self.edges
    }

    /// Constraint describing `s_to - s_from`.
    pub fn constraint(&self, from: NodeId, to: NodeId) -> Option<&EdgeConstraint> {
        self.edges.get(&(from, to))
    }

    /// Neighbors of `node`, ascending.
    pub fn neighbors(&self, node: NodeId) -> Vec<NodeId> {
        self.edges
            .keys()
            .filter(|&&(_, to)| to == node)
            .map(|&(from, _)| from)
            .collect()
    }

    /// Constraints for the messages flowing into `node`, keyed by sender.
    ///
    /// This is all an agent needs to run its part of the protocol.
    pub fn incoming(&self, node: NodeId) -> BTreeMap<NodeId, EdgeConstraint> {
        self.edges
            .iter()
            .filter(|((_, to), _)| *to == node)
            .map(|(&(from, _), c)| (from, c.clone()))
            .collect()
    }

    /// Largest eigenvalue over every edge's covariance basis.
    pub fn max_basis_eigenvalue(&self) -> f64 {
        self.edges
            .values()
            .map(EdgeConstraint::basis_max_eigenvalue)
            .fold(0.0, f64::max)
    }

    /// Hop distance from the anchor for every node (`None` when unreachable).
    pub fn hop_depths(&self) -> Vec<Option<usize>> {
        let adjacency = self.adjacency();
        let mut depth = vec![None; self.node_count];
        depth[self.anchor] = Some(0);
        let mut queue = VecDeque::from([self.anchor]);
        while let Some(n) = queue.pop_front() {
            let d = depth[n].unwrap_or_default();
            for &m in &adjacency[n] {
                if depth[m].is_none() {
                    depth[m] = Some(d + 1);
                    queue.push_back(m);
                }
            }
        }
        depth
    }

    pub fn ensure_connected(&self) -> Result<(), NetworkError> {
        match self.hop_depths().iter().position(Option::is_none) {
            Some(n) => Err(NetworkError::Unreachable(n)),
            None => Ok(()),
        }
    }

    pub(crate) fn adjacency(&self) -> Vec<BTreeSet<NodeId>> {
        let mut adj = vec![BTreeSet::new(); self.node_count];
        for &(from, to) in self.edges.keys() {
            adj[to].insert(from);
        }
        adj
    }
}
