//! Route discovery shared by all three protocols, and the distance-vector
//! message handlers used by AODV and the multi-connection variant.

use crate::connection::{ConnectionId, TeardownReason};
use crate::metrics::{ControlKind, DiscoveryPurpose, LogRecord};
use crate::network::{DiscState, Discovery, Network, Payload};
use crate::routing::{ControlMessage, Protocol, RouteEntry, RouteKey};
use crate::world::NodeId;

impl Network {
    /// Launch a discovery for `c` from `origin`, unless one is already
    /// searching there. `upstream` lists the nodes to tell if a local repair
    /// gives up.
    pub(crate) fn start_discovery(
        &mut self,
        origin: NodeId,
        c: ConnectionId,
        purpose: DiscoveryPurpose,
        batch: Option<usize>,
        upstream: Vec<NodeId>,
    ) {
        if self.open.contains_key(&(origin, c)) {
            return;
        }
        // a committed discovery still collecting replies is superseded
        for d in self.discoveries.iter_mut().rev().take(64) {
            if d.origin == origin && d.conn == c && d.state == DiscState::Committed {
                d.state = DiscState::Closed;
            }
        }
        let conn = &self.conns[c.0 as usize];
        let (target, priority) = (conn.dest, conn.priority);
        let idx = self.discoveries.len();
        self.discoveries.push(Discovery {
            origin,
            target,
            conn: c,
            purpose,
            attempt: 0,
            batch,
            state: DiscState::Searching,
            best_hops: u32::MAX,
            upstream,
        });
        self.open.insert((origin, c), idx);
        self.stats.discoveries += 1;
        if purpose == DiscoveryPurpose::LocalRepair {
            self.stats.local_repairs += 1;
        }
        if self.cfg.record_log {
            let at = self.now();
            self.ledger.log.push(LogRecord::DiscoveryStarted {
                at,
                conn: c,
                priority,
                origin,
                purpose,
                batch: batch.map(|b| self.batches[b].id),
            });
        }
        self.send_discovery_attempt(idx);
    }

    fn send_discovery_attempt(&mut self, d: usize) {
        let disc = &self.discoveries[d];
        let (origin, target, c, attempt) = (disc.origin, disc.target, disc.conn, disc.attempt);
        if disc.purpose != DiscoveryPurpose::LocalRepair {
            self.ledger.connection_requests += 1;
        }
        let node = &mut self.nodes[origin.index()];
        node.seq_no += 1;
        let origin_seq = node.seq_no;
        let rreq_id = node.next_rreq_id();
        node.first_sighting(origin, rreq_id);
        self.by_rreq.insert((origin, rreq_id), d);
        let mut msg = ControlMessage::new(ControlKind::Rreq, origin, target);
        msg.rreq_id = rreq_id;
        msg.origin_seq_no = origin_seq;
        msg.ttl = self.cfg.routing.net_diameter;
        match self.cfg.protocol {
            Protocol::Dsr => msg.route = vec![origin],
            Protocol::New => msg.connection = Some(c),
            Protocol::Aodv => {}
        }
        self.broadcast(origin, msg, true);
        let timeout = self.cfg.routing.discovery_timeout;
        self.schedule(timeout, Payload::DiscoveryTimeout { disc: d, attempt });
    }

    pub(crate) fn on_discovery_timeout(&mut self, d: usize, attempt: u32) {
        let disc = &mut self.discoveries[d];
        if disc.state != DiscState::Searching || disc.attempt != attempt {
            return;
        }
        let retries = match disc.purpose {
            DiscoveryPurpose::LocalRepair => self.cfg.routing.repair_retries,
            _ => self.cfg.routing.rreq_retries,
        };
        if disc.attempt < retries {
            disc.attempt += 1;
            self.send_discovery_attempt(d);
        } else {
            self.close_discovery(d, false);
            self.discovery_failed(d);
        }
    }

    /// End the search phase of `d` and release the next discovery of its
    /// batch, if any.
    pub(crate) fn close_discovery(&mut self, d: usize, success: bool) {
        let disc = &mut self.discoveries[d];
        if disc.state != DiscState::Searching {
            return;
        }
        disc.state = if success {
            DiscState::Committed
        } else {
            DiscState::Closed
        };
        let (origin, c, batch) = (disc.origin, disc.conn, disc.batch);
        self.open.remove(&(origin, c));
        if self.cfg.record_log {
            let at = self.now();
            self.ledger.log.push(LogRecord::DiscoveryFinished {
                at,
                conn: c,
                batch: batch.map(|b| self.batches[b].id),
                success,
            });
        }
        if let Some(b) = batch {
            let next = self.batches[b].complete(c);
            self.launch_batch(b, next);
        }
    }

    fn discovery_failed(&mut self, d: usize) {
        let disc = &self.discoveries[d];
        let c = disc.conn;
        match disc.purpose {
            DiscoveryPurpose::LocalRepair => {
                // give up locally and tell the source
                let (origin, upstream) = (disc.origin, disc.upstream.clone());
                self.notify_failure(origin, c, &upstream);
            }
            _ => self.teardown(c, TeardownReason::Unreachable),
        }
    }

    /// A reply for `(origin, rreq_id)` reached its originator. `route` is the
    /// full source route for DSR; otherwise the path is read off the tables.
    pub(crate) fn on_route_reply(
        &mut self,
        origin: NodeId,
        rreq_id: u32,
        hops: u32,
        route: Option<Vec<NodeId>>,
    ) {
        let Some(&d) = self.by_rreq.get(&(origin, rreq_id)) else {
            return;
        };
        let disc = &self.discoveries[d];
        let c = disc.conn;
        let upgrade = match disc.state {
            DiscState::Closed => return,
            DiscState::Searching => false,
            DiscState::Committed if hops < disc.best_hops => true,
            DiscState::Committed => return,
        };
        if self.conns[c.0 as usize].state.is_terminal() {
            return;
        }
        let src = self.conns[c.0 as usize].src;
        let path = match route {
            Some(r) => Some(r),
            None => self.walk(src, c),
        };
        let Some(path) = path else {
            return;
        };
        if !self.activate(c, path) {
            return;
        }
        self.discoveries[d].best_hops = hops;
        if !upgrade {
            self.close_discovery(d, true);
            let wait = self.cfg.routing.reply_wait;
            self.schedule(wait, Payload::ReplyWindowClosed { disc: d });
        }
    }

    pub(crate) fn od_on_rreq(&mut self, at: NodeId, from: NodeId, msg: &ControlMessage) {
        if at == msg.origin {
            return;
        }
        let now = self.now();
        let hops = msg.hop_count + 1;
        let first = self.nodes[at.index()].first_sighting(msg.origin, msg.rreq_id);
        if !first && at != msg.target {
            return;
        }
        if let (Protocol::New, Some(c)) = (self.cfg.protocol, msg.connection) {
            let req = self.conns[c.0 as usize].request();
            if !self.book.ledger(at).probe(&req) {
                return;
            }
        }
        let reverse = RouteKey::new(msg.origin, msg.connection);
        let entry = RouteEntry {
            dest: msg.origin,
            next_hop: from,
            hop_count: hops,
            dest_seq_no: msg.origin_seq_no,
            expires_at: now + self.cfg.routing.route_lifetime,
            valid: true,
            precursors: Vec::new(),
            last_used: now,
        };
        self.nodes[at.index()].table.offer(reverse, entry, now);
        if at == msg.target {
            let node = &mut self.nodes[at.index()];
            if !node.should_answer(msg.origin, msg.rreq_id, hops) {
                return;
            }
            node.seq_no += 1;
            let Some(back) = node.table.lookup(&reverse, now).map(|e| e.next_hop) else {
                return;
            };
            let mut rrep = ControlMessage::new(ControlKind::Rrep, msg.origin, at);
            rrep.rreq_id = msg.rreq_id;
            rrep.dest_seq_no = node.seq_no;
            rrep.connection = msg.connection;
            self.unicast(at, back, rrep, true);
            return;
        }
        if msg.ttl <= 1 {
            return;
        }
        let mut fwd = msg.clone();
        fwd.hop_count = hops;
        fwd.ttl -= 1;
        self.broadcast(at, fwd, false);
    }

    pub(crate) fn od_on_rrep(&mut self, at: NodeId, from: NodeId, msg: &ControlMessage) {
        let now = self.now();
        let hops = msg.hop_count + 1;
        let forward = RouteKey::new(msg.target, msg.connection);
        let entry = RouteEntry {
            dest: msg.target,
            next_hop: from,
            hop_count: hops,
            dest_seq_no: msg.dest_seq_no,
            expires_at: now + self.cfg.routing.route_lifetime,
            valid: true,
            precursors: Vec::new(),
            last_used: now,
        };
        let took = self.nodes[at.index()].table.offer(forward, entry, now);
        if at == msg.origin {
            if took {
                self.on_route_reply(at, msg.rreq_id, hops, None);
            }
            return;
        }
        if !took {
            return;
        }
        let reverse = RouteKey::new(msg.origin, msg.connection);
        let table = &mut self.nodes[at.index()].table;
        let Some(back) = table.lookup(&reverse, now).map(|e| e.next_hop) else {
            return;
        };
        table.add_precursor(&forward, back);
        let mut fwd = msg.clone();
        fwd.hop_count = hops;
        self.unicast(at, back, fwd, false);
    }

    /// Route failure arriving at `at` from downstream neighbour `from`.
    pub(crate) fn od_on_failure(&mut self, at: NodeId, from: NodeId, msg: &ControlMessage) {
        let key = RouteKey::new(msg.target, msg.connection);
        let uses_sender = self.nodes[at.index()]
            .table
            .get(&key)
            .is_some_and(|e| e.valid && e.next_hop == from);
        if !uses_sender {
            return;
        }
        let precursors = self.nodes[at.index()].table.invalidate(&key).unwrap_or_default();
        self.route_to_dest_lost(at, key);
        if !precursors.is_empty() {
            // plain AODV regenerates the error at every hop
            let originated = self.cfg.protocol == Protocol::Aodv;
            let mut m = msg.clone();
            m.origin = at;
            self.send_failure(at, &precursors, m, originated);
        }
    }

    /// Sources at `at` whose route `key` just became invalid start over.
    fn route_to_dest_lost(&mut self, at: NodeId, key: RouteKey) {
        let affected: Vec<ConnectionId> = self
            .conns
            .iter()
            .filter(|c| c.src == at && c.dest == key.dest && c.state.is_live())
            .filter(|c| key.conn.is_none_or(|k| k == c.id))
            .map(|c| c.id)
            .collect();
        for c in affected {
            self.source_rediscover(c);
        }
    }

    pub(crate) fn send_failure(
        &mut self,
        at: NodeId,
        to: &[NodeId],
        msg: ControlMessage,
        originated: bool,
    ) {
        match to {
            [] => {}
            [one] => {
                self.unicast(at, *one, msg, originated);
            }
            _ => self.broadcast_to(at, to, msg, originated),
        }
    }

    /// One broadcast transmission that only the listed neighbours act on.
    fn broadcast_to(&mut self, at: NodeId, to: &[NodeId], msg: ControlMessage, originated: bool) {
        let mut first = true;
        for &n in to {
            if first {
                self.unicast(at, n, msg.clone(), originated);
                first = false;
            } else if n != at && self.link(at, n) {
                let delay = self.cfg.routing.control_hop_delay;
                self.schedule(
                    delay,
                    Payload::Control {
                        from: at,
                        to: n,
                        msg: std::sync::Arc::new(msg.clone()),
                    },
                );
            }
        }
    }

    /// A local repair at `reporter` gave up: send a route failure toward
    /// the source of `c`.
    pub(crate) fn notify_failure(&mut self, reporter: NodeId, c: ConnectionId, upstream: &[NodeId]) {
        let (src, dest) = {
            let conn = &self.conns[c.0 as usize];
            (conn.src, conn.dest)
        };
        if !self.conns[c.0 as usize].state.is_live() {
            return;
        }
        if reporter == src {
            self.source_rediscover(c);
            return;
        }
        let mut msg = ControlMessage::new(ControlKind::RouteFailure, reporter, dest);
        msg.connection = self.cfg.protocol.per_connection_routes().then_some(c);
        self.send_failure(reporter, upstream, msg, true);
    }

    /// Data reached `at` (from `up`) but `at` has no route onward.
    pub(crate) fn report_no_route(&mut self, at: NodeId, up: NodeId, c: ConnectionId) {
        if self.cfg.protocol == Protocol::Dsr {
            return;
        }
        let dest = self.conns[c.0 as usize].dest;
        let key = self.route_key(dest, c);
        if self.open.contains_key(&(at, c)) {
            return; // repair in progress here
        }
        let tag = match key.conn {
            Some(k) => u64::from(k.0),
            None => (1 << 40) | u64::from(dest.0),
        };
        if !self.may_report(at, tag) {
            return;
        }
        let mut msg = ControlMessage::new(ControlKind::RouteFailure, at, dest);
        msg.connection = key.conn;
        self.unicast(at, up, msg, true);
    }

    /// The source of `c` found itself without a route.
    pub(crate) fn source_route_lost(&mut self, c: ConnectionId) {
        if self.cfg.protocol == Protocol::Dsr {
            let src = self.conns[c.0 as usize].src;
            self.dsr_reroute_or_rediscover(src, c);
        } else {
            self.source_rediscover(c);
        }
    }

    /// Suspend `c` and flood a fresh discovery from its source.
    pub(crate) fn source_rediscover(&mut self, c: ConnectionId) {
        let conn = &self.conns[c.0 as usize];
        if !conn.state.is_live() {
            return;
        }
        let src = conn.src;
        if self.open.contains_key(&(src, c)) {
            return;
        }
        self.suspend(c);
        self.start_discovery(src, c, DiscoveryPurpose::Rediscovery, None, Vec::new());
    }
}
