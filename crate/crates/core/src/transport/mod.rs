//! Distributed execution of the synchronous rounds.
//!
//! Each [`SensorAgent`] owns only its incoming edge constraints and its own
//! belief. Per round it broadcasts the belief from the previous round over a
//! [`BeliefLink`], waits for every neighbor's belief of that same round and
//! runs the local update. Agents run a fixed number of rounds; there is no
//! global convergence vote.

use std::collections::BTreeMap;
use std::io;
use std::net::SocketAddr;
use std::time::Duration;

use thiserror::Error;

use crate::bp::{init_belief, update_node, BpConfig, BpError, GaussianBelief};
use crate::geometry::EdgeConstraint;
use crate::network::{NetworkConstraints, NodeId};

pub mod frame;
mod inproc;
mod udp;

pub use frame::{
    decode_belief_frame, decode_frame, encode_ack_frame, encode_belief_frame, Frame, FrameError, BELIEF_FRAME_LEN,
};
pub use inproc::{channel_links, ChannelLink};
pub use udp::UdpLink;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Missing {
    /// No belief frame arrived from the neighbor.
    Frame,
    /// The neighbor never acknowledged our frame.
    Ack,
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("node {node}, iteration {iteration}: round timed out on edge {neighbor}->{node} ({missing:?} missing)")]
    RoundTimeout {
        node: NodeId,
        neighbor: NodeId,
        iteration: u32,
        missing: Missing,
    },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Bp(#[from] BpError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("node {0}: peer channel closed")]
    ChannelClosed(NodeId),
    #[error("node {0}: no address for neighbor {1}")]
    MissingPeer(NodeId, NodeId),
    #[error("agent thread for node {0} panicked")]
    AgentPanicked(NodeId),
}

/// Broadcast medium seen by one agent.
pub trait BeliefLink {
    /// Sends `own` (the belief after `iteration`) to every neighbor and
    /// returns every neighbor's belief for the same iteration.
    fn exchange(
        &mut self,
        iteration: u32,
        own: &GaussianBelief,
    ) -> Result<BTreeMap<NodeId, GaussianBelief>, TransportError>;

    /// Called once after the last round.
    fn finish(&mut self) -> Result<(), TransportError> {
        Ok(())
    }
}

/// One sensor running its share of the rounds.
#[derive(Debug, Clone)]
pub struct SensorAgent {
    id: NodeId,
    is_anchor: bool,
    sigma2: f64,
    incoming: BTreeMap<NodeId, EdgeConstraint>,
    belief: GaussianBelief,
}

impl SensorAgent {
    /// Builds agent `id` from its local view of `network`. `alpha` is the
    /// network-wide prior scale.
    pub fn new(network: &NetworkConstraints, id: NodeId, sigma2: f64, alpha: f64) -> Result<Self, BpError> {
        let incoming = network.incoming(id);
        let is_anchor = id == network.anchor();
        let belief = if is_anchor {
            GaussianBelief::anchor(network.anchor_position())
        } else {
            init_belief(incoming.len(), alpha).map_err(|e| match e {
                BpError::IsolatedNode(_) => BpError::IsolatedNode(id),
                other => other,
            })?
        };
        Ok(Self {
            id,
            is_anchor,
            sigma2,
            incoming,
            belief,
        })
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn neighbors(&self) -> Vec<NodeId> {
        self.incoming.keys().copied().collect()
    }

    pub fn belief(&self) -> &GaussianBelief {
        &self.belief
    }

    /// Local update from the neighbors' previous-round beliefs. Beliefs from
    /// nodes outside the neighbor set are ignored.
    pub fn step(&mut self, received: &BTreeMap<NodeId, GaussianBelief>) -> Result<GaussianBelief, BpError> {
        if !self.is_anchor {
            let inputs = self
                .incoming
                .iter()
                .filter_map(|(j, c)| received.get(j).map(|b| (b, c)));
            self.belief = update_node(inputs, self.sigma2)?;
        }
        Ok(self.belief)
    }

    /// Runs `rounds` rounds over `link` and returns the belief after every
    /// iteration, starting with the initial belief.
    pub fn run<L: BeliefLink>(&mut self, link: &mut L, rounds: u32) -> Result<Vec<GaussianBelief>, TransportError> {
        let mut history = Vec::with_capacity(rounds as usize + 1);
        history.push(self.belief);
        for iteration in 1..=rounds {
            let received = link.exchange(iteration - 1, &self.belief)?;
            let missing = self.incoming.keys().find(|j| !received.contains_key(j));
            if let Some(&neighbor) = missing {
                return Err(TransportError::RoundTimeout {
                    node: self.id,
                    neighbor,
                    iteration: iteration - 1,
                    missing: Missing::Frame,
                });
            }
            let b = self.step(&received).map_err(|e| BpError::NodeUpdate {
                node: self.id,
                iteration: iteration as usize,
                source: Box::new(e),
            })?;
            history.push(b);
        }
        link.finish()?;
        Ok(history)
    }
}

/// Retransmission policy for lossy links.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub retries: u32,
    pub interval: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 10,
            interval: Duration::from_millis(200),
        }
    }
}

impl RetryPolicy {
    pub fn budget(&self) -> Duration {
        self.interval * (self.retries + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TransportKind {
    /// Threads exchanging beliefs over channels with a barrier per round.
    InProcess,
    /// One UDP socket per agent on the loopback interface.
    UdpLoopback(RetryPolicy),
}

/// Belief history of a distributed run, `history[iteration][node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRun {
    pub history: Vec<Vec<GaussianBelief>>,
    pub alpha: f64,
}

/// Runs every agent of `network` for `config.max_iters` rounds.
pub fn run_agents(
    network: &NetworkConstraints,
    config: &BpConfig,
    transport: &TransportKind,
) -> Result<AgentRun, TransportError> {
    let alpha = config.resolve_alpha(network)?;
    let rounds = u32::try_from(config.max_iters).unwrap_or(u32::MAX);
    let agents = (0..network.node_count())
        .map(|n| SensorAgent::new(network, n, config.sigma2, alpha))
        .collect::<Result<Vec<_>, _>>()?;

    let per_node = match transport {
        TransportKind::InProcess => {
            let links = channel_links(network, RetryPolicy::default().budget());
            run_threads(agents, links, rounds)?
        }
        TransportKind::UdpLoopback(policy) => {
            let sockets = (0..network.node_count())
                .map(|_| std::net::UdpSocket::bind("127.0.0.1:0"))
                .collect::<Result<Vec<_>, _>>()?;
            let addrs: Vec<SocketAddr> = sockets
                .iter()
                .map(|s| s.local_addr())
                .collect::<Result<_, _>>()?;
            let links = sockets
                .into_iter()
                .enumerate()
                .map(|(n, socket)| {
                    let peers = network.neighbors(n).into_iter().map(|j| (j, addrs[j])).collect();
                    UdpLink::new(n, socket, peers, *policy)
                })
                .collect::<Result<Vec<_>, _>>()?;
            run_threads(agents, links, rounds)?
        }
    };

    let iterations = per_node.first().map_or(0, Vec::len);
    let history = (0..iterations)
        .map(|l| per_node.iter().map(|h| h[l]).collect())
        .collect();
    Ok(AgentRun { history, alpha })
}

fn run_threads<L: BeliefLink + Send>(
    agents: Vec<SensorAgent>,
    links: Vec<L>,
    rounds: u32,
) -> Result<Vec<Vec<GaussianBelief>>, TransportError> {
    std::thread::scope(|scope| {
        let handles: Vec<_> = agents
            .into_iter()
            .zip(links)
            .map(|(mut agent, mut link)| {
                let id = agent.id();
                (id, scope.spawn(move || agent.run(&mut link, rounds)))
            })
            .collect();
        let mut out = Vec::with_capacity(handles.len());
        let mut first_err = None;
        for (id, h) in handles {
            match h.join() {
                Ok(Ok(history)) => out.push(history),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(TransportError::AgentPanicked(id));
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    })
}
