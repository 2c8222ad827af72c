use std::collections::{BTreeMap, BTreeSet};
use std::io::ErrorKind;
use std::net::{SocketAddr, UdpSocket};
use std::time::Instant;

use log::{debug, warn};

use super::frame::{decode_frame, encode_ack_frame, encode_belief_frame, Frame};
use super::{BeliefLink, Missing, RetryPolicy, TransportError};
use crate::bp::GaussianBelief;
use crate::network::NodeId;

/// UDP link with per-round acknowledgment.
///
/// Every received belief frame is acknowledged, including duplicates of
/// earlier rounds, so a neighbor whose ack was lost can still finish its
/// round. A round completes once all neighbor frames for it have arrived and
/// all neighbors have acknowledged ours.
pub struct UdpLink {
    id: NodeId,
    socket: UdpSocket,
    peers: BTreeMap<NodeId, SocketAddr>,
    policy: RetryPolicy,
    pending: BTreeMap<(u32, NodeId), GaussianBelief>,
    buf: [u8; 64],
}

impl UdpLink {
    pub fn new(
        id: NodeId,
        socket: UdpSocket,
        peers: BTreeMap<NodeId, SocketAddr>,
        policy: RetryPolicy,
    ) -> Result<Self, TransportError> {
        socket.set_read_timeout(Some(policy.interval))?;
        Ok(Self {
            id,
            socket,
            peers,
            policy,
            pending: BTreeMap::new(),
            buf: [0; 64],
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, TransportError> {
        Ok(self.socket.local_addr()?)
    }

    /// Handles at most one datagram, waiting up to the retry interval.
    fn poll(&mut self, current: u32, acked: &mut BTreeSet<NodeId>) -> Result<(), TransportError> {
        let len = match self.socket.recv_from(&mut self.buf) {
            Ok((len, _)) => len,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match decode_frame(&self.buf[..len]) {
            Ok(Frame::Belief {
                sender,
                iteration,
                belief,
            }) => {
                let Some(addr) = self.peers.get(&sender).copied() else {
                    debug!("node {}: ignoring frame from non-neighbor {sender}", self.id);
                    return Ok(());
                };
                self.socket.send_to(&encode_ack_frame(self.id, iteration)?, addr)?;
                if iteration >= current {
                    self.pending.insert((iteration, sender), belief);
                }
            }
            Ok(Frame::Ack { sender, iteration }) => {
                if iteration == current && self.peers.contains_key(&sender) {
                    acked.insert(sender);
                }
            }
            Err(e) => warn!("node {}: dropping malformed datagram: {e}", self.id),
        }
        Ok(())
    }
}

impl BeliefLink for UdpLink {
    fn exchange(
        &mut self,
        iteration: u32,
        own: &GaussianBelief,
    ) -> Result<BTreeMap<NodeId, GaussianBelief>, TransportError> {
        let frame = encode_belief_frame(self.id, iteration, own)?;
        let mut acked = BTreeSet::new();
        let mut attempts = 0;
        let mut deadline = Instant::now();
        loop {
            let missing_frame = self
                .peers
                .keys()
                .copied()
                .find(|&j| !self.pending.contains_key(&(iteration, j)));
            let missing_ack = self.peers.keys().copied().find(|j| !acked.contains(j));
            if missing_frame.is_none() && missing_ack.is_none() {
                break;
            }
            if Instant::now() >= deadline {
                if attempts > self.policy.retries {
                    let (neighbor, missing) = match (missing_frame, missing_ack) {
                        (Some(j), _) => (j, Missing::Frame),
                        (None, Some(j)) => (j, Missing::Ack),
                        (None, None) => unreachable!("loop exits when nothing is missing"),
                    };
                    return Err(TransportError::RoundTimeout {
                        node: self.id,
                        neighbor,
                        iteration,
                        missing,
                    });
                }
                for (j, addr) in &self.peers {
                    if !acked.contains(j) {
                        self.socket.send_to(&frame, addr)?;
                    }
                }
                attempts += 1;
                deadline = Instant::now() + self.policy.interval;
            }
            self.poll(iteration, &mut acked)?;
        }
        Ok(self
            .peers
            .keys()
            .filter_map(|&j| self.pending.remove(&(iteration, j)).map(|b| (j, b)))
            .collect())
    }

    /// Keeps acknowledging retransmissions for a short while so neighbors
    /// whose acks were lost can complete their last round.
    fn finish(&mut self) -> Result<(), TransportError> {
        let until = Instant::now() + self.policy.interval * 2;
        let mut ignored = BTreeSet::new();
        while Instant::now() < until {
            self.poll(u32::MAX, &mut ignored)?;
        }
        Ok(())
    }
}
