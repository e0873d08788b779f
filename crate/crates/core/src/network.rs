//! The simulated network: one engine driving the world, the routing state
//! of every node, the connection ledgers and the data plane.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connection::{
    Admission, BandwidthBook, ConnState, Connection, ConnectionError, ConnectionId, Kbps, Priority,
    ReestablishBatch, ReestablishMode, TeardownReason,
};
use crate::engine::{Engine, SimTime};
use crate::metrics::{ControlKind, DiscoveryPurpose, LogRecord, MetricsLedger};
use crate::rng::RngStream;
use crate::routing::{ControlMessage, NodeRouting, Protocol, RouteKey, RoutingConfig};
use crate::traffic::{DataPacket, Flow, FlowKind, LeakyBucket, TrafficConfig};
use crate::world::{NodeId, World};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub protocol: Protocol,
    pub routing: RoutingConfig,
    pub traffic: TrafficConfig,
    pub reestablish: ReestablishMode,
    /// Check ledger conservation, allocation bounds and loop freedom after
    /// every event. Violations panic.
    pub debug_invariants: bool,
    /// Also walk every routing table for loops after each event (costly).
    pub check_loops: bool,
    pub record_log: bool,
}

impl NetworkConfig {
    pub fn new(protocol: Protocol) -> Self {
        NetworkConfig {
            protocol,
            routing: RoutingConfig::default(),
            traffic: TrafficConfig::default(),
            reestablish: ReestablishMode::Serial,
            debug_invariants: false,
            check_loops: false,
            record_log: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectionSpec {
    pub src: NodeId,
    pub dest: NodeId,
    pub priority: Priority,
    pub demanded_bw: Kbps,
    pub min_bw: Kbps,
    pub kind: FlowKind,
    pub start: f64,
    /// The source stops emitting here; routing carries on so anything in
    /// flight can still arrive.
    pub stop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetworkError {
    #[error("{0} node capacities for {1} nodes")]
    CapacityCount(usize, usize),
    #[error("connection {index}: {source}")]
    Connection {
        index: usize,
        source: ConnectionError,
    },
    #[error("connection {0} names a node outside the network")]
    UnknownNode(usize),
    #[error("connection {0}: demand must be positive")]
    ZeroDemand(usize),
    #[error("connection {0}: start time must be finite and non-negative")]
    BadStart(usize),
    #[error("connection {0}: stop time precedes start")]
    BadStop(usize),
}

#[derive(Clone, Debug)]
pub(crate) enum Payload {
    MobilityEpoch(NodeId),
    Hello(NodeId),
    Control {
        from: NodeId,
        to: NodeId,
        msg: Arc<ControlMessage>,
    },
    Data {
        from: NodeId,
        to: NodeId,
        packet: DataPacket,
    },
    DiscoveryTimeout {
        disc: usize,
        attempt: u32,
    },
    ReplyWindowClosed {
        disc: usize,
    },
    ConnStart(ConnectionId),
    Emit {
        conn: ConnectionId,
        epoch: u64,
    },
    Retransmit {
        conn: ConnectionId,
        seq: u64,
        attempt: u32,
    },
    Ack {
        conn: ConnectionId,
        seq: u64,
        sent_at: SimTime,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum DiscState {
    Searching,
    /// A route was committed; better replies may still upgrade it.
    Committed,
    Closed,
}

#[derive(Clone, Debug)]
pub(crate) struct Discovery {
    pub origin: NodeId,
    pub target: NodeId,
    pub conn: ConnectionId,
    pub purpose: DiscoveryPurpose,
    pub attempt: u32,
    pub batch: Option<usize>,
    pub state: DiscState,
    pub best_hops: u32,
    /// Nodes to notify if a local repair fails.
    pub upstream: Vec<NodeId>,
}

/// Counters about the run itself rather than the network.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub events: u64,
    pub invariant_checks: u64,
    pub discoveries: u64,
    pub local_repairs: u64,
    pub policy_drops: u64,
    pub realtime_dropped_for_bulk: u64,
}

pub struct Network {
    pub(crate) cfg: NetworkConfig,
    pub(crate) engine: Engine<Payload>,
    pub(crate) world: World,
    pub(crate) nodes: Vec<NodeRouting>,
    pub(crate) conns: Vec<Connection>,
    pub(crate) flows: Vec<Flow>,
    pub(crate) book: BandwidthBook,
    pub(crate) buckets: Vec<LeakyBucket>,
    pub(crate) discoveries: Vec<Discovery>,
    /// (origin, rreq_id) -> discovery
    pub(crate) by_rreq: BTreeMap<(NodeId, u32), usize>,
    /// Discovery currently searching for a connection at an origin.
    pub(crate) open: BTreeMap<(NodeId, ConnectionId), usize>,
    pub(crate) batches: Vec<ReestablishBatch>,
    /// Batches with discoveries still queued or running.
    pub(crate) live_batches: Vec<usize>,
    /// last_heard[listener * n + speaker]
    pub(crate) last_heard: Vec<f64>,
    /// Last failure report per (reporter, connection or link key).
    pub(crate) reported: BTreeMap<(NodeId, u64), SimTime>,
    pub(crate) ledger: MetricsLedger,
    pub(crate) stats: RunStats,
    ledgers_touched: bool,
}

impl Network {
    pub fn new(
        cfg: NetworkConfig,
        world: World,
        capacities: Vec<Kbps>,
        specs: &[ConnectionSpec],
        hello_phase: &mut RngStream,
    ) -> Result<Network, NetworkError> {
        let n = world.node_count();
        if capacities.len() != n {
            return Err(NetworkError::CapacityCount(capacities.len(), n));
        }
        let mut conns = Vec::with_capacity(specs.len());
        let mut flows = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            if s.src.index() >= n || s.dest.index() >= n {
                return Err(NetworkError::UnknownNode(i));
            }
            if s.demanded_bw == 0 {
                return Err(NetworkError::ZeroDemand(i));
            }
            if !(s.start.is_finite() && s.start >= 0.0) {
                return Err(NetworkError::BadStart(i));
            }
            if s.stop.is_some_and(|t| !(t >= s.start)) {
                return Err(NetworkError::BadStop(i));
            }
            let id = ConnectionId(i as u32);
            let c = Connection::new(id, s.src, s.dest, s.priority, s.demanded_bw, s.min_bw)
                .map_err(|source| NetworkError::Connection { index: i, source })?;
            conns.push(c);
            let mut flow = Flow::new(id, s.kind, cfg.traffic.packet_bits);
            flow.stop = s.stop.unwrap_or(f64::INFINITY);
            flows.push(flow);
        }
        let depth = cfg.traffic.node_buffer * cfg.traffic.packet_bits;
        let buckets = capacities.iter().map(|&c| LeakyBucket::new(c, depth)).collect();
        let nodes = world
            .nodes()
            .map(|id| NodeRouting::new(id, cfg.routing.dsr_cache_capacity))
            .collect();
        let mut net = Network {
            engine: Engine::new(),
            nodes,
            conns,
            flows,
            book: BandwidthBook::new(capacities),
            buckets,
            discoveries: Vec::new(),
            by_rreq: BTreeMap::new(),
            open: BTreeMap::new(),
            batches: Vec::new(),
            live_batches: Vec::new(),
            last_heard: vec![f64::NEG_INFINITY; n * n],
            reported: BTreeMap::new(),
            ledger: MetricsLedger::default(),
            stats: RunStats::default(),
            ledgers_touched: false,
            world,
            cfg,
        };
        for node in net.world.nodes().collect::<Vec<_>>() {
            let end = net.world.epoch_end(node).expect("known node");
            net.engine
                .schedule(end, Payload::MobilityEpoch(node))
                .expect("epoch ends in the future");
            let interval = net.cfg.routing.hello_interval;
            if interval > 0.0 {
                let phase = hello_phase.draw_uniform(0.0, interval).expect("positive interval");
                net.schedule(phase, Payload::Hello(node));
            }
        }
        for (i, s) in specs.iter().enumerate() {
            net.schedule(s.start, Payload::ConnStart(ConnectionId(i as u32)));
        }
        Ok(net)
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    /// Scripted scenarios move nodes between runs of the loop.
    pub fn world_mut(&mut self) -> &mut World {
        &mut self.world
    }

    pub fn connections(&self) -> &[Connection] {
        &self.conns
    }

    pub fn connection(&self, id: ConnectionId) -> &Connection {
        &self.conns[id.0 as usize]
    }

    pub fn node(&self, id: NodeId) -> &NodeRouting {
        &self.nodes[id.index()]
    }

    /// Fault injection for tests.
    pub fn node_mut(&mut self, id: NodeId) -> &mut NodeRouting {
        &mut self.nodes[id.index()]
    }

    pub fn bandwidth(&self) -> &BandwidthBook {
        &self.book
    }

    pub fn ledger(&self) -> &MetricsLedger {
        &self.ledger
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    /// Run every event up to and including `t_end`.
    pub fn run_until(&mut self, t_end: SimTime) {
        while let Some(ev) = self.engine.pop_until(t_end) {
            self.stats.events += 1;
            self.dispatch(ev.payload);
            if self.cfg.debug_invariants {
                self.check_invariants();
            }
            if self.cfg.check_loops {
                if let Some((node, key)) = self.find_loop() {
                    panic!("routing loop from {node} for {key:?} at t={}", self.now());
                }
            }
        }
        self.engine.advance_to(t_end).expect("clock only moves forward");
    }

    /// Run to `t_end` and close the books.
    pub fn finish(mut self, t_end: SimTime) -> (MetricsLedger, RunStats) {
        self.run_until(t_end);
        self.finish_flows();
        self.ledger.run_duration = t_end.secs();
        (self.ledger, self.stats)
    }

    fn dispatch(&mut self, p: Payload) {
        match p {
            Payload::MobilityEpoch(node) => {
                let now = self.now();
                self.world.advance_to(node, now).expect("known node");
                let end = self.world.epoch_end(node).expect("known node");
                self.engine
                    .schedule(end, Payload::MobilityEpoch(node))
                    .expect("epoch ends in the future");
            }
            Payload::Hello(node) => self.on_hello(node),
            Payload::Control { from, to, msg } => self.on_control(from, to, &msg),
            Payload::Data { from, to, packet } => self.on_data(from, to, packet),
            Payload::DiscoveryTimeout { disc, attempt } => self.on_discovery_timeout(disc, attempt),
            Payload::ReplyWindowClosed { disc } => {
                if self.discoveries[disc].state == DiscState::Committed {
                    self.discoveries[disc].state = DiscState::Closed;
                }
            }
            Payload::ConnStart(c) => self.on_conn_start(c),
            Payload::Emit { conn, epoch } => self.on_emit(conn, epoch),
            Payload::Retransmit { conn, seq, attempt } => self.on_retransmit(conn, seq, attempt),
            Payload::Ack { conn, seq, sent_at } => self.on_ack(conn, seq, sent_at),
        }
    }

    pub(crate) fn schedule(&mut self, delay: f64, p: Payload) {
        self.engine.schedule_in(delay, p).expect("non-negative delay");
    }

    pub(crate) fn link(&self, a: NodeId, b: NodeId) -> bool {
        self.world.can_transmit(a, b, self.now()).expect("known nodes")
    }

    pub(crate) fn heard(&mut self, listener: NodeId, speaker: NodeId) {
        let n = self.nodes.len();
        self.last_heard[listener.index() * n + speaker.index()] = self.now().secs();
    }

    pub(crate) fn last_heard(&self, listener: NodeId, speaker: NodeId) -> f64 {
        self.last_heard[listener.index() * self.nodes.len() + speaker.index()]
    }

    pub(crate) fn route_key(&self, dest: NodeId, conn: ConnectionId) -> RouteKey {
        let c = self.cfg.protocol.per_connection_routes().then_some(conn);
        RouteKey::new(dest, c)
    }

    fn count_control(&mut self, kind: ControlKind, originated: bool) {
        self.ledger.control.record_transmission(kind);
        if originated {
            self.ledger.control.record_origination(kind);
        }
    }

    /// Local broadcast to every node in range.
    pub(crate) fn broadcast(&mut self, from: NodeId, msg: ControlMessage, originated: bool) {
        self.count_control(msg.kind, originated);
        let now = self.now();
        let msg = Arc::new(msg);
        let delay = self.cfg.routing.control_hop_delay;
        for to in self.world.neighbors(from, now).expect("known node") {
            self.schedule(
                delay,
                Payload::Control {
                    from,
                    to,
                    msg: Arc::clone(&msg),
                },
            );
        }
    }

    /// Unicast to a neighbour. The transmission is counted even when the
    /// neighbour turns out to be out of range; returns whether it can hear.
    pub(crate) fn unicast(&mut self, from: NodeId, to: NodeId, msg: ControlMessage, originated: bool) -> bool {
        self.count_control(msg.kind, originated);
        if from == to || !self.link(from, to) {
            return false;
        }
        let delay = self.cfg.routing.control_hop_delay;
        self.schedule(
            delay,
            Payload::Control {
                from,
                to,
                msg: Arc::new(msg),
            },
        );
        true
    }

    fn on_control(&mut self, from: NodeId, to: NodeId, msg: &ControlMessage) {
        self.heard(to, from);
        match (self.cfg.protocol, msg.kind) {
            (_, ControlKind::Hello) => {}
            (Protocol::Dsr, ControlKind::Rreq) => self.dsr_on_rreq(to, from, msg),
            (Protocol::Dsr, ControlKind::Rrep) => self.dsr_on_rrep(to, msg),
            (Protocol::Dsr, ControlKind::RouteFailure) => self.dsr_on_error(to, msg),
            (_, ControlKind::Rreq) => self.od_on_rreq(to, from, msg),
            (_, ControlKind::Rrep) => self.od_on_rrep(to, from, msg),
            (_, ControlKind::RouteFailure) => self.od_on_failure(to, from, msg),
        }
    }

    /// Rate limiter for failure reports; true if one may be sent now.
    pub(crate) fn may_report(&mut self, reporter: NodeId, key: u64) -> bool {
        let now = self.now();
        let hold = self.cfg.routing.failure_holdoff;
        match self.reported.get(&(reporter, key)) {
            Some(&t) if now - t < hold => false,
            _ => {
                self.reported.insert((reporter, key), now);
                true
            }
        }
    }

    fn on_conn_start(&mut self, c: ConnectionId) {
        let idx = c.0 as usize;
        if self.conns[idx].state != ConnState::Discovering {
            return;
        }
        let src = self.conns[idx].src;
        if self.cfg.protocol == Protocol::Dsr {
            let dest = self.conns[idx].dest;
            if let Some(route) = self.nodes[src.index()].cache.find(dest) {
                self.activate(c, route);
                return;
            }
        }
        self.start_discovery(src, c, DiscoveryPurpose::Initial, None, Vec::new());
    }

    /// Install `path` as the connection's route and start (or resume) its
    /// traffic. Under the multi-connection protocol every node on the path
    /// must admit the connection; returns false if one refuses.
    pub(crate) fn activate(&mut self, c: ConnectionId, path: Vec<NodeId>) -> bool {
        let idx = c.0 as usize;
        if self.conns[idx].state.is_terminal() {
            return false;
        }
        let bw = if self.cfg.protocol == Protocol::New {
            match self.admit_path(c, &path) {
                Some(bw) => bw,
                None => return false,
            }
        } else {
            self.conns[idx].demanded_bw
        };
        let conn = &mut self.conns[idx];
        conn.route = path;
        conn.allocated_bw = bw;
        conn.state = ConnState::Active;
        self.flow_activated(c, bw);
        true
    }

    /// Admit `c` at every node of `path`, releasing whatever it held before.
    /// Lower-priority connections evicted on the way are torn down.
    fn admit_path(&mut self, c: ConnectionId, path: &[NodeId]) -> Option<Kbps> {
        self.ledgers_touched = true;
        let idx = c.0 as usize;
        let old = std::mem::take(&mut self.conns[idx].route);
        self.book.release_route(c, &old);
        let req = self.conns[idx].request();
        let mut bw = req.demanded;
        let mut granted = Vec::with_capacity(path.len());
        for &node in path {
            let outcome = self
                .book
                .ledger_mut(node)
                .admit(&req)
                .expect("grants were released first");
            for victim in outcome.dropped {
                let vp = self.conns[victim.0 as usize].priority;
                self.stats.policy_drops += 1;
                if vp == Priority::Realtime && req.priority == Priority::Bulk {
                    self.stats.realtime_dropped_for_bulk += 1;
                }
                if self.cfg.record_log {
                    let at = self.now();
                    self.ledger.log.push(LogRecord::PolicyDrop {
                        at,
                        node,
                        victim,
                        victim_priority: vp,
                        incoming: c,
                        incoming_priority: req.priority,
                    });
                }
                self.teardown(victim, TeardownReason::Policy);
            }
            match outcome.decision {
                Admission::Rejected => {
                    self.book.release_route(c, &granted);
                    if self.conns[idx].state == ConnState::Active {
                        self.conns[idx].state = ConnState::Repairing;
                    }
                    self.conns[idx].allocated_bw = 0;
                    return None;
                }
                Admission::Granted(b) | Admission::Renegotiated(b) => {
                    bw = bw.min(b);
                    granted.push(node);
                }
            }
        }
        for &node in path {
            self.book.ledger_mut(node).trim(c, bw);
        }
        Some(bw)
    }

    /// Mark a live connection as repairing, dropping its reservations.
    pub(crate) fn suspend(&mut self, c: ConnectionId) {
        let idx = c.0 as usize;
        if !self.conns[idx].state.is_live() {
            return;
        }
        if self.cfg.protocol == Protocol::New {
            let route = std::mem::take(&mut self.conns[idx].route);
            self.book.release_route(c, &route);
            self.ledgers_touched = true;
        }
        self.conns[idx].state = ConnState::Repairing;
        self.conns[idx].allocated_bw = 0;
    }

    /// Release everything `c` holds and move it to a terminal state.
    /// Tearing down a connection twice is a no-op.
    pub fn teardown(&mut self, c: ConnectionId, reason: TeardownReason) {
        let idx = c.0 as usize;
        if self.conns[idx].state.is_terminal() {
            return;
        }
        let route = std::mem::take(&mut self.conns[idx].route);
        self.book.release_route(c, &route);
        self.ledgers_touched = true;
        let conn = &mut self.conns[idx];
        conn.allocated_bw = 0;
        conn.state = match reason {
            TeardownReason::Policy => ConnState::Dropped,
            TeardownReason::Unreachable => ConnState::Failed,
        };
        self.ledger.record_teardown(reason);
        if self.cfg.record_log {
            let at = self.now();
            self.ledger.log.push(LogRecord::Teardown { at, conn: c, reason });
        }
        self.flow_stopped(c);
        let open: Vec<usize> = self
            .open
            .iter()
            .filter(|((_, cc), _)| *cc == c)
            .map(|(_, &d)| d)
            .collect();
        for d in open {
            self.close_discovery(d, false);
        }
        for b in self.live_batches.clone() {
            if self.batches[b].contains(c) {
                let next = self.batches[b].complete(c);
                self.launch_batch(b, next);
            }
        }
    }

    pub(crate) fn launch_batch(&mut self, batch: usize, conns: Vec<ConnectionId>) {
        let node = self.batches[batch].node;
        for c in conns {
            if self.conns[c.0 as usize].state.is_live() {
                self.start_discovery(node, c, DiscoveryPurpose::Rediscovery, Some(batch), Vec::new());
            } else {
                let next = self.batches[batch].complete(c);
                self.launch_batch(batch, next);
            }
        }
        if self.batches[batch].is_done() {
            self.live_batches.retain(|&b| b != batch);
        }
    }

    /// Follow next-hop pointers for `c` from `from`. None if the chain
    /// breaks or revisits a node.
    pub(crate) fn walk(&self, from: NodeId, c: ConnectionId) -> Option<Vec<NodeId>> {
        let dest = self.conns[c.0 as usize].dest;
        let key = self.route_key(dest, c);
        let now = self.now();
        let mut path = vec![from];
        let mut at = from;
        while at != dest {
            let e = self.nodes[at.index()].table.lookup(&key, now)?;
            if path.contains(&e.next_hop) || path.len() > self.nodes.len() {
                return None;
            }
            at = e.next_hop;
            path.push(at);
        }
        Some(path)
    }

    /// First node revisited when following valid next hops for `key` from
    /// any node, if any.
    pub fn find_loop(&self) -> Option<(NodeId, RouteKey)> {
        let now = self.now();
        for start in &self.nodes {
            for (key, _) in start.table.iter() {
                let mut seen = vec![start.id];
                let mut at = start.id;
                while let Some(e) = self.nodes[at.index()].table.lookup(key, now) {
                    if e.next_hop == key.dest {
                        break;
                    }
                    if seen.contains(&e.next_hop) {
                        return Some((start.id, *key));
                    }
                    seen.push(e.next_hop);
                    at = e.next_hop;
                }
            }
        }
        None
    }

    fn check_invariants(&mut self) {
        if !std::mem::take(&mut self.ledgers_touched) {
            return;
        }
        self.stats.invariant_checks += 1;
        let bad = self.book.violations();
        assert!(bad.is_empty(), "capacity exceeded at {bad:?} at t={}", self.now());
        for c in &self.conns {
            assert!(
                c.allocation_valid(),
                "{} has allocation {} outside [{}, {}] in state {:?}",
                c.id,
                c.allocated_bw,
                c.min_bw,
                c.demanded_bw,
                c.state
            );
        }
    }
}
