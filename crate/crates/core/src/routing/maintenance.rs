//! Link monitoring and the reaction to broken links: hello beacons, local
//! repair, source re-establishment and failure propagation.

use crate::connection::{ConnState, ConnectionId, Priority, ReestablishBatch};
use crate::metrics::{ControlKind, DiscoveryPurpose};
use crate::network::{Network, Payload};
use crate::routing::{ControlMessage, Protocol, RepairInitiator, RouteKey};
use crate::traffic::DataPacket;
use crate::world::NodeId;

impl Network {
    pub(crate) fn on_hello(&mut self, node: NodeId) {
        let now = self.now();
        self.ledger.control.record_origination(ControlKind::Hello);
        self.ledger.control.record_transmission(ControlKind::Hello);
        for b in self.world.neighbors(node, now).expect("known node") {
            self.heard(b, node);
        }
        let interval = self.cfg.routing.hello_interval;
        let deadline = f64::from(self.cfg.routing.allowed_misses) * interval;
        let watched = self.watched_neighbours(node);
        for h in watched {
            if now.secs() - self.last_heard(node, h) > deadline {
                self.link_lost(node, h);
            }
        }
        self.schedule(interval, Payload::Hello(node));
    }

    /// Neighbours `node` currently relies on as next hops.
    fn watched_neighbours(&self, node: NodeId) -> Vec<NodeId> {
        match self.cfg.protocol {
            Protocol::Dsr => {
                let mut v: Vec<NodeId> = self
                    .conns
                    .iter()
                    .filter(|c| c.src == node && c.state == ConnState::Active)
                    .filter_map(|c| c.route.get(1).copied())
                    .collect();
                v.sort();
                v.dedup();
                v
            }
            _ => self.nodes[node.index()]
                .table
                .active_next_hops(self.now(), self.cfg.routing.active_window),
        }
    }

    /// `node` concluded that `lost` is gone.
    pub(crate) fn link_lost(&mut self, node: NodeId, lost: NodeId) {
        match self.cfg.protocol {
            Protocol::Dsr => self.dsr_link_lost(node, lost),
            _ => self.on_link_break(node, lost),
        }
    }

    /// Forwarding data from `at` to `next` failed because `next` is out of
    /// range.
    pub(crate) fn data_link_failed(&mut self, at: NodeId, next: NodeId, packet: &DataPacket) {
        match self.cfg.protocol {
            Protocol::Dsr => self.dsr_data_failed(at, next, packet),
            _ => self.on_link_break(at, next),
        }
    }

    /// Distance-vector reaction to losing the link `node -> lost`.
    pub fn on_link_break(&mut self, node: NodeId, lost: NodeId) {
        let now = self.now();
        let window = self.cfg.routing.active_window;
        let table = &mut self.nodes[node.index()].table;
        // idle entries through `lost` just go; nobody is relying on them
        let active: Vec<RouteKey> = table
            .iter()
            .filter(|(_, e)| e.next_hop == lost && e.active(now, window))
            .map(|(k, _)| *k)
            .collect();
        let broken = table.invalidate_via(lost);
        let mut source_hit = false;
        for (key, precursors) in broken {
            if !active.contains(&key) {
                continue;
            }
            match key.conn {
                None => {
                    // plain AODV: sources rediscover, everyone else reports
                    let sources: Vec<ConnectionId> = self
                        .conns
                        .iter()
                        .filter(|c| c.src == node && c.dest == key.dest && c.state.is_live())
                        .map(|c| c.id)
                        .collect();
                    for c in sources {
                        self.source_rediscover(c);
                    }
                    if !precursors.is_empty() {
                        let msg = ControlMessage::new(ControlKind::RouteFailure, node, key.dest);
                        self.send_failure(node, &precursors, msg, true);
                    }
                }
                Some(c) => {
                    let conn = &self.conns[c.0 as usize];
                    if !conn.state.is_live() || key.dest != conn.dest {
                        continue;
                    }
                    if conn.src == node {
                        source_hit = true;
                    } else {
                        self.local_repair(node, lost, c, precursors);
                    }
                }
            }
        }
        if source_hit {
            self.reestablish_all(node, Some(lost));
        }
    }

    /// An on-path node rebuilds the segment toward the destination on the
    /// source's behalf.
    fn local_repair(&mut self, node: NodeId, lost: NodeId, c: ConnectionId, upstream: Vec<NodeId>) {
        let dest = self.conns[c.0 as usize].dest;
        let initiator = match self.cfg.routing.repair_initiator {
            RepairInitiator::Downstream if lost != dest => lost,
            _ => node,
        };
        if self.open.contains_key(&(initiator, c)) {
            return;
        }
        if initiator != node {
            // the literal reading: the far side of the break searches, and
            // this node can only report if nothing comes of it
            self.start_discovery(initiator, c, DiscoveryPurpose::LocalRepair, None, Vec::new());
            if self.walk(self.conns[c.0 as usize].src, c).is_none() {
                self.notify_failure(node, c, &upstream);
            }
            return;
        }
        self.start_discovery(node, c, DiscoveryPurpose::LocalRepair, None, upstream);
    }

    /// The moved node re-discovers every live connection it sources, in
    /// the configured order. Connections whose route used `broken_via` are
    /// suspended meanwhile; the others keep flowing until their new route
    /// is committed.
    pub fn reestablish_all(&mut self, node: NodeId, broken_via: Option<NodeId>) {
        let mut members: Vec<(ConnectionId, Priority)> = Vec::new();
        for i in 0..self.conns.len() {
            let c = &self.conns[i];
            if c.src != node || !c.state.is_live() || self.open.contains_key(&(node, c.id)) {
                continue;
            }
            if self.live_batches.iter().any(|&b| self.batches[b].contains(c.id)) {
                continue;
            }
            let broken = c.state == ConnState::Repairing
                || broken_via.is_some_and(|l| c.route.get(1) == Some(&l))
                || self.walk(node, c.id).is_none();
            let id = c.id;
            members.push((id, c.priority));
            if broken {
                self.suspend(id);
            }
        }
        if members.is_empty() {
            return;
        }
        let b = self.batches.len();
        let (batch, launch) =
            ReestablishBatch::start(b as u64, node, self.cfg.reestablish, &members);
        self.batches.push(batch);
        self.live_batches.push(b);
        self.launch_batch(b, launch);
    }
}
