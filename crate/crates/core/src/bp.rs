//! Closed-form Gaussian belief propagation in the broadcast form.
//!
//! Every non-anchor node keeps a Gaussian belief `N(mu, P)` over its own
//! position. In each synchronous round a node receives its neighbors'
//! previous beliefs, turns each into a message through the edge constraint
//!
//! ```text
//! nu_ji = mu_j + G_ji^+ d_ji
//! W_ji  = sigma^2 Sigma_ji + P_j
//! ```
//!
//! and fuses the messages by adding precisions. The anchor's belief is a
//! point mass, so its messages reduce to `N(G^+ d, sigma^2 Sigma)` and never
//! change.
//!
//! A neighbor's *full* belief feeds the message, so information a node sent
//! out earlier comes back to it. This is the broadcast variant, not cavity
//! sum-product.

use log::trace;
use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{EdgeConstraint, GeometryTolerances, Position};
use crate::network::{NetworkConstraints, NodeId};

/// Lower bound on the automatically chosen `alpha`, in square meters.
pub const DEFAULT_ALPHA_FLOOR: f64 = 1e4;
pub const DEFAULT_SIGMA2: f64 = 3.0;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITERS: usize = 100;

/// Condition number above which a message covariance gets a ridge.
const MAX_CONDITION: f64 = 1e12;
const RIDGE_SCALE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BpError {
    #[error("node {0} has no neighbors")]
    IsolatedNode(NodeId),
    #[error("no messages to fuse")]
    NoMessages,
    #[error("numerical failure: {0}")]
    NumericalFailure(&'static str),
    #[error("belief maps cover different node sets ({0} vs {1} nodes)")]
    MismatchedNodeSets(usize, usize),
    #[error("alpha = {alpha} is below the required 2 sigma^2 lambda_max = {required}")]
    AlphaTooSmall { alpha: f64, required: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(&'static str),
    #[error("update of node {node} at iteration {iteration} failed")]
    NodeUpdate {
        node: NodeId,
        iteration: usize,
        #[source]
        source: Box<BpError>,
    },
}

/// A node's Gaussian belief over its own position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBelief {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    /// Anchor beliefs are point masses; their covariance is ignored.
    pub is_anchor: bool,
}

impl GaussianBelief {
    pub fn new(mean: Vector2<f64>, covariance: Matrix2<f64>) -> Self {
        Self {
            mean,
            covariance,
            is_anchor: false,
        }
    }

    pub fn anchor(position: Position) -> Self {
        Self {
            mean: position.to_vector(),
            covariance: Matrix2::zeros(),
            is_anchor: true,
        }
    }

    pub fn estimate(&self) -> Position {
        Position::from(self.mean)
    }
}

/// Factor-to-variable message `N(nu, W)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeliefMessage {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BpConfig {
    /// Prior variance scale; `None` picks `max(1e4, 2 sigma^2 lambda_max)`.
    pub alpha: Option<f64>,
    /// Per-path range noise variance assumed by the model, m^2.
    pub sigma2: f64,
    /// Convergence threshold on the largest mean displacement, meters.
    pub tol: f64,
    pub max_iters: usize,
    pub geometry: GeometryTolerances,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            alpha: None,
            sigma2: DEFAULT_SIGMA2,
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
            geometry: GeometryTolerances::default(),
        }
    }
}

impl BpConfig {
    /// Checks the scalar settings and resolves `alpha` against the network.
    pub fn resolve_alpha(&self, network: &NetworkConstraints) -> Result<f64, BpError> {
        if !(self.sigma2 > 0.0) {
            return Err(BpError::InvalidConfig("sigma2 must be positive"));
        }
        if !(self.tol > 0.0) {
            return Err(BpError::InvalidConfig("tol must be positive"));
        }
        if self.max_iters == 0 {
            return Err(BpError::InvalidConfig("max_iters must be at least 1"));
        }
        let required = 2.0 * self.sigma2 * network.max_basis_eigenvalue();
        match self.alpha {
            None => Ok(DEFAULT_ALPHA_FLOOR.max(required)),
            Some(alpha) if alpha >= required && alpha > 0.0 => Ok(alpha),
            Some(alpha) => Err(BpError::AlphaTooSmall { alpha, required }),
        }
    }
}

/// Initial belief of a non-anchor node: zero mean, `alpha I` (or `1.5 alpha I`
/// for leaf nodes).
pub fn init_belief(neighbor_count: usize, alpha: f64) -> Result<GaussianBelief, BpError> {
    if !(alpha > 0.0) {
        return Err(BpError::InvalidConfig("alpha must be positive"));
    }
    let scale = match neighbor_count {
        0 => return Err(BpError::IsolatedNode(0)),
        1 => 1.5 * alpha,
        _ => alpha,
    };
    Ok(GaussianBelief::new(Vector2::zeros(), Matrix2::identity() * scale))
}

pub fn compute_message(sender: &GaussianBelief, edge: &EdgeConstraint, sigma2: f64) -> BeliefMessage {
    let mut covariance = edge.basis * sigma2;
    if !sender.is_anchor {
        covariance += sender.covariance;
    }
    BeliefMessage {
        mean: sender.mean + edge.offset,
        covariance,
    }
}

fn symmetrize(m: Matrix2<f64>) -> Matrix2<f64> {
    (m + m.transpose()) * 0.5
}

/// Adds a small ridge when `w` is singular or badly conditioned.
fn regularize(w: Matrix2<f64>) -> Result<Matrix2<f64>, BpError> {
    let w = symmetrize(w);
    if !w.iter().all(|v| v.is_finite()) {
        return Err(BpError::NumericalFailure("non-finite message covariance"));
    }
    let trace = w.trace();
    if !(trace > 0.0) {
        return Err(BpError::NumericalFailure("message covariance has no positive variance"));
    }
    let eig = w.symmetric_eigenvalues();
    let (lo, hi) = (eig.min(), eig.max());
    if lo <= 0.0 || hi / lo > MAX_CONDITION {
        Ok(w + Matrix2::identity() * (RIDGE_SCALE * trace / 2.0))
    } else {
        Ok(w)
    }
}

/// Precision-weighted product of Gaussian messages.
///
/// A single message passes through unchanged (covariance regularized if
/// needed), so its mean is not perturbed by an inverse round trip.
pub fn fuse_messages(incoming: &[BeliefMessage]) -> Result<GaussianBelief, BpError> {
    match incoming {
        [] => return Err(BpError::NoMessages),
        [only] => {
            let w = regularize(only.covariance)?;
            if !only.mean.iter().all(|v| v.is_finite()) {
                return Err(BpError::NumericalFailure("fused mean is not finite"));
            }
            return Ok(GaussianBelief::new(only.mean, symmetrize(w)));
        }
        _ => {}
    }
    let mut precision = Matrix2::zeros();
    let mut information = Vector2::zeros();
    for msg in incoming {
        let w = regularize(msg.covariance)?;
        let w_inv = w
            .try_inverse()
            .ok_or(BpError::NumericalFailure("message covariance is not invertible"))?;
        precision += w_inv;
        information += w_inv * msg.mean;
    }
    let covariance = symmetrize(
        symmetrize(precision)
            .try_inverse()
            .ok_or(BpError::NumericalFailure("fused precision is not invertible"))?,
    );
    let mean = covariance * information;
    if !mean.iter().all(|v| v.is_finite()) {
        return Err(BpError::NumericalFailure("fused mean is not finite"));
    }
    Ok(GaussianBelief::new(mean, covariance))
}

/// True iff every mean moved by less than `tol`.
pub fn has_converged(prev: &[GaussianBelief], curr: &[GaussianBelief], tol: f64) -> Result<bool, BpError> {
    if prev.len() != curr.len() {
        return Err(BpError::MismatchedNodeSets(prev.len(), curr.len()));
    }
    Ok(prev
        .iter()
        .zip(curr)
        .all(|(p, c)| (c.mean - p.mean).norm() < tol))
}

/// One node's update from its neighbors' previous beliefs.
///
/// `inputs` yields `(neighbor belief, constraint for s_self - s_neighbor)`
/// pairs; callers pass them in ascending neighbor order so every execution
/// path performs the same floating-point operations.
pub fn update_node<'a>(
    inputs: impl IntoIterator<Item = (&'a GaussianBelief, &'a EdgeConstraint)>,
    sigma2: f64,
) -> Result<GaussianBelief, BpError> {
    let messages: Vec<BeliefMessage> = inputs
        .into_iter()
        .map(|(b, c)| compute_message(b, c, sigma2))
        .collect();
    fuse_messages(&messages)
}

/// Initial beliefs for every node of `network`.
pub fn initial_beliefs(network: &NetworkConstraints, alpha: f64) -> Result<Vec<GaussianBelief>, BpError> {
    (0..network.node_count())
        .map(|n| {
            if n == network.anchor() {
                Ok(GaussianBelief::anchor(network.anchor_position()))
            } else {
                init_belief(network.neighbors(n).len(), alpha).map_err(|e| match e {
                    BpError::IsolatedNode(_) => BpError::IsolatedNode(n),
                    other => other,
                })
            }
        })
        .collect()
}

/// Belief history of a synchronous run.
#[derive(Debug, Clone, PartialEq)]
pub struct BpRun {
    /// `history[l][n]` is node `n`'s belief after iteration `l`; `history[0]`
    /// holds the initial beliefs.
    pub history: Vec<Vec<GaussianBelief>>,
    pub converged: bool,
    pub alpha: f64,
}

impl BpRun {
    pub fn iterations(&self) -> usize {
        self.history.len() - 1
    }

    pub fn final_beliefs(&self) -> &[GaussianBelief] {
        self.history.last().expect("history always holds the initial beliefs")
    }

    pub fn estimates(&self) -> Vec<Position> {
        self.final_beliefs().iter().map(GaussianBelief::estimate).collect()
    }
}

/// Runs synchronous rounds until convergence or `max_iters`.
pub fn run_sync_rounds(network: &NetworkConstraints, config: &BpConfig) -> Result<BpRun, BpError> {
    let alpha = config.resolve_alpha(network)?;
    let neighbors: Vec<Vec<NodeId>> = (0..network.node_count()).map(|n| network.neighbors(n)).collect();
    let mut history = vec![initial_beliefs(network, alpha)?];
    let mut converged = false;
    for iteration in 1..=config.max_iters {
        let prev = history.last().expect("non-empty history");
        let next = (0..network.node_count())
            .map(|n| {
                if n == network.anchor() {
                    return Ok(prev[n]);
                }
                let inputs = neighbors[n].iter().map(|&j| {
                    let c = network.constraint(j, n).expect("neighbor lists come from the edge map");
                    (&prev[j], c)
                });
                update_node(inputs, config.sigma2).map_err(|e| BpError::NodeUpdate {
                    node: n,
                    iteration,
                    source: Box::new(e),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        converged = has_converged(prev, &next, config.tol)?;
        history.push(next);
        trace!("iteration {iteration}: converged = {converged}");
        if converged {
            break;
        }
    }
    Ok(BpRun {
        history,
        converged,
        alpha,
    })
}
