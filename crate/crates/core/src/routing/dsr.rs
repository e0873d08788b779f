//! Simplified dynamic source routing: full routes in packets, per-node
//! route caches, replies from cache, and route errors back to the source.

use crate::connection::{ConnState, ConnectionId};
use crate::metrics::ControlKind;
use crate::network::Network;
use crate::routing::{is_cycle_free, ControlMessage};
use crate::traffic::DataPacket;
use crate::world::NodeId;

impl Network {
    pub(crate) fn dsr_on_rreq(&mut self, at: NodeId, from: NodeId, msg: &ControlMessage) {
        if msg.route.contains(&at) {
            return;
        }
        if at == msg.target {
            // the target answers every copy; the source keeps the best
            let mut route = msg.route.clone();
            route.push(at);
            self.nodes[at.index()].seq_no += 1;
            self.dsr_reply(at, from, msg, route);
            return;
        }
        if !self.nodes[at.index()].first_sighting(msg.origin, msg.rreq_id) {
            return;
        }
        if let Some(suffix) = self.nodes[at.index()].cache.find(msg.target) {
            let mut route = msg.route.clone();
            route.extend_from_slice(&suffix);
            if is_cycle_free(&route) {
                self.dsr_reply(at, from, msg, route);
                return;
            }
        }
        if msg.ttl <= 1 {
            return;
        }
        let mut fwd = msg.clone();
        fwd.route.push(at);
        fwd.hop_count += 1;
        fwd.ttl -= 1;
        self.broadcast(at, fwd, false);
    }

    fn dsr_reply(&mut self, at: NodeId, back: NodeId, rreq: &ControlMessage, route: Vec<NodeId>) {
        let pos = route.iter().position(|&n| n == at).expect("replier on route");
        self.nodes[at.index()].cache.insert(&route[pos..]);
        let mut rrep = ControlMessage::new(ControlKind::Rrep, rreq.origin, rreq.target);
        rrep.rreq_id = rreq.rreq_id;
        rrep.route = route;
        self.unicast(at, back, rrep, true);
    }

    pub(crate) fn dsr_on_rrep(&mut self, at: NodeId, msg: &ControlMessage) {
        let Some(pos) = msg.route.iter().position(|&n| n == at) else {
            return;
        };
        self.nodes[at.index()].cache.insert(&msg.route[pos..]);
        if pos == 0 {
            let hops = (msg.route.len() - 1) as u32;
            self.on_route_reply(at, msg.rreq_id, hops, Some(msg.route.clone()));
            return;
        }
        let back = msg.route[pos - 1];
        self.unicast(at, back, msg.clone(), false);
    }

    /// Route error travelling back toward the source along `msg.route`.
    pub(crate) fn dsr_on_error(&mut self, at: NodeId, msg: &ControlMessage) {
        let Some((a, b)) = msg.broken_link else {
            return;
        };
        self.nodes[at.index()].cache.purge_link(a, b);
        let Some(pos) = msg.route.iter().position(|&n| n == at) else {
            return;
        };
        if pos + 1 == msg.route.len() {
            self.dsr_source_break(at, a, b);
            return;
        }
        let next = msg.route[pos + 1];
        self.unicast(at, next, msg.clone(), false);
    }

    /// Data could not cross `at -> next`.
    pub(crate) fn dsr_data_failed(&mut self, at: NodeId, next: NodeId, packet: &DataPacket) {
        self.nodes[at.index()].cache.purge_link(at, next);
        let src = self.conns[packet.conn.0 as usize].src;
        if at == src {
            self.dsr_source_break(at, at, next);
            return;
        }
        let Some(route) = packet.route.as_ref() else {
            return;
        };
        let pos = packet.hops as usize;
        let tag = (1 << 48) | (u64::from(next.0) << 24) | u64::from(src.0);
        if !self.may_report(at, tag) {
            return;
        }
        let mut back: Vec<NodeId> = route[..=pos].to_vec();
        back.reverse();
        let mut err = ControlMessage::new(ControlKind::RouteFailure, at, src);
        err.broken_link = Some((at, next));
        err.route = back;
        let first = err.route[1];
        self.unicast(at, first, err, true);
    }

    /// Hello timeout at a source for its first hop.
    pub(crate) fn dsr_link_lost(&mut self, node: NodeId, lost: NodeId) {
        self.nodes[node.index()].cache.purge_link(node, lost);
        self.dsr_source_break(node, node, lost);
    }

    /// `src` learned that link `a -> b` is gone.
    fn dsr_source_break(&mut self, src: NodeId, a: NodeId, b: NodeId) {
        self.nodes[src.index()].cache.purge_link(a, b);
        let hit: Vec<ConnectionId> = self
            .conns
            .iter()
            .filter(|c| c.src == src && c.state == ConnState::Active)
            .filter(|c| c.route.windows(2).any(|w| w[0] == a && w[1] == b))
            .map(|c| c.id)
            .collect();
        for c in hit {
            self.dsr_reroute_or_rediscover(src, c);
        }
    }

    /// Switch to another cached route if there is one, else rediscover.
    pub(crate) fn dsr_reroute_or_rediscover(&mut self, src: NodeId, c: ConnectionId) {
        let dest = self.conns[c.0 as usize].dest;
        if let Some(route) = self.nodes[src.index()].cache.find(dest) {
            if route != self.conns[c.0 as usize].route {
                self.activate(c, route);
                return;
            }
        }
        self.source_rediscover(c);
    }
}
