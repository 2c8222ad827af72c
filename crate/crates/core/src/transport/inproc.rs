use std::collections::BTreeMap;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Barrier};
use std::time::{Duration, Instant};

use super::{BeliefLink, Missing, TransportError};
use crate::bp::GaussianBelief;
use crate::network::{NetworkConstraints, NodeId};

type Envelope = (NodeId, u32, GaussianBelief);

/// In-process link: beliefs travel over channels, and all agents meet at a
/// barrier at the end of every exchange.
pub struct ChannelLink {
    id: NodeId,
    outboxes: BTreeMap<NodeId, Sender<Envelope>>,
    inbox: Receiver<Envelope>,
    pending: BTreeMap<(u32, NodeId), GaussianBelief>,
    barrier: Arc<Barrier>,
    timeout: Duration,
}

/// One link per node of `network`, wired along its edges.
pub fn channel_links(network: &NetworkConstraints, timeout: Duration) -> Vec<ChannelLink> {
    let n = network.node_count();
    let (senders, receivers): (Vec<_>, Vec<_>) = (0..n).map(|_| channel::<Envelope>()).unzip();
    let barrier = Arc::new(Barrier::new(n));
    receivers
        .into_iter()
        .enumerate()
        .map(|(id, inbox)| ChannelLink {
            id,
            outboxes: network
                .neighbors(id)
                .into_iter()
                .map(|j| (j, senders[j].clone()))
                .collect(),
            inbox,
            pending: BTreeMap::new(),
            barrier: Arc::clone(&barrier),
            timeout,
        })
        .collect()
}

impl BeliefLink for ChannelLink {
    fn exchange(
        &mut self,
        iteration: u32,
        own: &GaussianBelief,
    ) -> Result<BTreeMap<NodeId, GaussianBelief>, TransportError> {
        for tx in self.outboxes.values() {
            tx.send((self.id, iteration, *own))
                .map_err(|_| TransportError::ChannelClosed(self.id))?;
        }
        let deadline = Instant::now() + self.timeout;
        loop {
            let missing = self
                .outboxes
                .keys()
                .find(|&&j| !self.pending.contains_key(&(iteration, j)));
            let Some(&neighbor) = missing else { break };
            let wait = deadline.saturating_duration_since(Instant::now());
            match self.inbox.recv_timeout(wait) {
                Ok((sender, it, belief)) => {
                    if self.outboxes.contains_key(&sender) && it >= iteration {
                        self.pending.insert((it, sender), belief);
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(TransportError::RoundTimeout {
                        node: self.id,
                        neighbor,
                        iteration,
                        missing: Missing::Frame,
                    })
                }
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::ChannelClosed(self.id)),
            }
        }
        let received = self
            .outboxes
            .keys()
            .filter_map(|&j| self.pending.remove(&(iteration, j)).map(|b| (j, b)))
            .collect();
        self.barrier.wait();
        Ok(received)
    }
}
