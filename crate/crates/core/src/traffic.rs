//! Per-connection packet sources and the data plane: emission, hop-by-hop
//! forwarding, delivery accounting and a small window-based reliable
//! transport.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::connection::{ConnState, ConnectionId, Kbps};
use crate::engine::SimTime;
use crate::metrics::{LogRecord, LossReason};
use crate::network::{Network, Payload};
use crate::routing::Protocol;
use crate::world::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    /// Fire and forget.
    Datagram,
    /// Fixed window, timeout retransmission, receiver dedup.
    Reliable,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficConfig {
    pub packet_bits: u64,
    pub per_hop_latency: f64,
    pub ttl: u32,
    pub window: usize,
    pub initial_rto: f64,
    pub rto_factor: f64,
    pub max_retries: u32,
    /// Packets a reliable source holds while its route is being repaired.
    pub repair_buffer: usize,
    /// Forwarding queue depth per node, in packets.
    pub node_buffer: u64,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        TrafficConfig {
            packet_bits: 512 * 8,
            per_hop_latency: 0.001,
            ttl: 32,
            window: 8,
            initial_rto: 1.0,
            rto_factor: 4.0,
            max_retries: 5,
            repair_buffer: 64,
            node_buffer: 64,
        }
    }
}

/// Seconds a packet of `bits` spends on one hop at `kbps`.
pub fn hop_delay(bits: u64, kbps: Kbps, per_hop_latency: f64) -> f64 {
    bits as f64 / (kbps as f64 * 1000.0) + per_hop_latency
}

/// Seconds between packets so that the offered rate matches `kbps`.
pub fn emit_interval(bits: u64, kbps: Kbps) -> f64 {
    bits as f64 / (kbps as f64 * 1000.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataPacket {
    pub conn: ConnectionId,
    pub seq: u64,
    pub created_at: SimTime,
    pub bits: u64,
    /// Hops travelled so far.
    pub hops: u32,
    /// When the source put this copy on the air (RTT sampling).
    pub sent_at: SimTime,
    /// Source route, for DSR.
    pub route: Option<Arc<[NodeId]>>,
}

/// Sequence numbers seen at a receiver.
#[derive(Clone, Debug, Default)]
pub struct SeqSet {
    words: Vec<u64>,
}

impl SeqSet {
    /// Returns true the first time `seq` is inserted.
    pub fn insert(&mut self, seq: u64) -> bool {
        let (w, b) = ((seq / 64) as usize, seq % 64);
        if w >= self.words.len() {
            self.words.resize(w + 1, 0);
        }
        let fresh = self.words[w] & (1 << b) == 0;
        self.words[w] |= 1 << b;
        fresh
    }

    pub fn contains(&self, seq: u64) -> bool {
        let (w, b) = ((seq / 64) as usize, seq % 64);
        self.words.get(w).is_some_and(|x| x & (1 << b) != 0)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ReliableState {
    /// seq -> (created_at, attempts so far)
    pub outstanding: BTreeMap<u64, (SimTime, u32)>,
    pub buffer: VecDeque<(u64, SimTime)>,
    pub srtt: Option<f64>,
}

impl ReliableState {
    pub fn rto(&self, cfg: &TrafficConfig) -> f64 {
        match self.srtt {
            Some(s) => cfg.rto_factor * s,
            None => cfg.initial_rto,
        }
    }

    pub fn observe_rtt(&mut self, sample: f64) {
        self.srtt = Some(match self.srtt {
            None => sample,
            Some(s) => 0.875 * s + 0.125 * sample,
        });
    }
}

#[derive(Clone, Debug)]
pub struct Flow {
    pub conn: ConnectionId,
    pub kind: FlowKind,
    pub packet_bits: u64,
    /// Current emission rate; kept through a repair so the source keeps
    /// offering load at its last allocation.
    pub rate: Kbps,
    pub next_seq: u64,
    pub emitting: bool,
    /// Bumped whenever the emission timer is rescheduled; stale timer events
    /// carry an old value and are ignored.
    pub epoch: u64,
    pub reliable: ReliableState,
    pub delivered: SeqSet,
    pub source_route: Option<Arc<[NodeId]>>,
    /// Emission ends at this time, in seconds.
    pub stop: f64,
}

impl Flow {
    pub fn new(conn: ConnectionId, kind: FlowKind, packet_bits: u64) -> Self {
        Flow {
            conn,
            kind,
            packet_bits,
            rate: 0,
            next_seq: 0,
            emitting: false,
            epoch: 0,
            reliable: ReliableState::default(),
            delivered: SeqSet::default(),
            source_route: None,
            stop: f64::INFINITY,
        }
    }

    pub fn interval(&self) -> f64 {
        emit_interval(self.packet_bits, self.rate)
    }
}

/// Token bucket standing in for a node's transmit queue: it drains at the
/// node's capacity and overflows once `depth_bits` are queued.
#[derive(Clone, Debug)]
pub struct LeakyBucket {
    rate_bps: f64,
    depth_bits: f64,
    level: f64,
    last: SimTime,
}

impl LeakyBucket {
    pub fn new(rate_kbps: Kbps, depth_bits: u64) -> Self {
        LeakyBucket {
            rate_bps: rate_kbps as f64 * 1000.0,
            depth_bits: depth_bits as f64,
            level: 0.0,
            last: SimTime::ZERO,
        }
    }

    pub fn admit(&mut self, now: SimTime, bits: u64) -> bool {
        let drained = (now - self.last) * self.rate_bps;
        self.level = (self.level - drained).max(0.0);
        self.last = now;
        if self.level + bits as f64 > self.depth_bits {
            return false;
        }
        self.level += bits as f64;
        true
    }
}

impl Network {
    /// Start or retune the emission timer after the connection became
    /// active at `rate`.
    pub(crate) fn flow_activated(&mut self, conn: ConnectionId, rate: Kbps) {
        let route = match self.cfg.protocol {
            Protocol::Dsr => Some(Arc::from(self.conns[conn.0 as usize].route.as_slice())),
            _ => None,
        };
        let flow = &mut self.flows[conn.0 as usize];
        flow.source_route = route;
        let retuned = flow.rate != rate;
        flow.rate = rate;
        if !flow.emitting {
            flow.emitting = true;
            flow.epoch += 1;
            let epoch = flow.epoch;
            self.schedule(0.0, Payload::Emit { conn, epoch });
        } else if retuned {
            flow.epoch += 1;
            let (epoch, dt) = (flow.epoch, flow.interval());
            self.schedule(dt, Payload::Emit { conn, epoch });
        }
        self.pump(conn);
    }

    pub(crate) fn flow_stopped(&mut self, conn: ConnectionId) {
        let flow = &mut self.flows[conn.0 as usize];
        flow.emitting = false;
        flow.epoch += 1;
    }

    pub(crate) fn on_emit(&mut self, conn: ConnectionId, epoch: u64) {
        let idx = conn.0 as usize;
        if self.flows[idx].epoch != epoch {
            return;
        }
        let state = self.conns[idx].state;
        if !state.is_live() || self.now().secs() >= self.flows[idx].stop {
            self.flows[idx].emitting = false;
            return;
        }
        let dt = self.flows[idx].interval();
        if self.flows[idx].kind == FlowKind::Reliable
            && state == ConnState::Active
            && self.flows[idx].reliable.buffer.len() >= self.cfg.traffic.repair_buffer
        {
            // a sender blocked by its own window generates nothing
            self.schedule(dt, Payload::Emit { conn, epoch });
            return;
        }
        let flow = &mut self.flows[idx];
        let seq = flow.next_seq;
        flow.next_seq += 1;
        let kind = flow.kind;
        self.ledger.record_sent(conn);
        let now = self.now();
        match (kind, state) {
            (FlowKind::Datagram, ConnState::Active) => self.transmit(conn, seq, now),
            (FlowKind::Datagram, _) => self.ledger.record_loss(LossReason::Repairing),
            (FlowKind::Reliable, _) => {
                let cap = self.cfg.traffic.repair_buffer;
                let r = &mut self.flows[idx].reliable;
                if r.buffer.len() >= cap {
                    self.ledger.record_loss(LossReason::BufferOverflow);
                } else {
                    r.buffer.push_back((seq, now));
                    self.pump(conn);
                }
            }
        }
        self.schedule(dt, Payload::Emit { conn, epoch });
    }

    /// Move buffered reliable packets into the window while the connection
    /// is active.
    pub(crate) fn pump(&mut self, conn: ConnectionId) {
        let idx = conn.0 as usize;
        if self.flows[idx].kind != FlowKind::Reliable {
            return;
        }
        while self.conns[idx].state == ConnState::Active {
            let r = &mut self.flows[idx].reliable;
            if r.outstanding.len() >= self.cfg.traffic.window {
                break;
            }
            let Some((seq, created)) = r.buffer.pop_front() else {
                break;
            };
            r.outstanding.insert(seq, (created, 0));
            self.send_reliable(conn, seq);
        }
    }

    fn send_reliable(&mut self, conn: ConnectionId, seq: u64) {
        let idx = conn.0 as usize;
        let r = &mut self.flows[idx].reliable;
        let Some(entry) = r.outstanding.get_mut(&seq) else {
            return;
        };
        entry.1 += 1;
        let (created, attempt) = *entry;
        let rto = r.rto(&self.cfg.traffic);
        self.schedule(rto, Payload::Retransmit { conn, seq, attempt });
        self.transmit(conn, seq, created);
    }

    pub(crate) fn on_retransmit(&mut self, conn: ConnectionId, seq: u64, attempt: u32) {
        let idx = conn.0 as usize;
        match self.flows[idx].reliable.outstanding.get(&seq) {
            Some(&(_, a)) if a == attempt => {}
            _ => return,
        }
        if self.conns[idx].state.is_terminal() {
            return;
        }
        if attempt > self.cfg.traffic.max_retries {
            self.flows[idx].reliable.outstanding.remove(&seq);
            self.ledger.record_loss(LossReason::RetriesExhausted);
            self.pump(conn);
        } else if self.conns[idx].state == ConnState::Active {
            self.send_reliable(conn, seq);
        } else {
            // hold the retry until the route is back
            let rto = self.flows[idx].reliable.rto(&self.cfg.traffic);
            self.schedule(rto, Payload::Retransmit { conn, seq, attempt });
        }
    }

    pub(crate) fn on_ack(&mut self, conn: ConnectionId, seq: u64, sent_at: SimTime) {
        let now = self.now();
        let r = &mut self.flows[conn.0 as usize].reliable;
        if r.outstanding.remove(&seq).is_some() {
            r.observe_rtt(now - sent_at);
            self.pump(conn);
        }
    }

    /// Put one packet on the air at the connection's source.
    fn transmit(&mut self, conn: ConnectionId, seq: u64, created_at: SimTime) {
        let flow = &self.flows[conn.0 as usize];
        let packet = DataPacket {
            conn,
            seq,
            created_at,
            bits: flow.packet_bits,
            hops: 0,
            sent_at: self.now(),
            route: flow.source_route.clone(),
        };
        let src = self.conns[conn.0 as usize].src;
        self.forward_data(src, None, packet);
    }

    pub(crate) fn on_data(&mut self, from: NodeId, to: NodeId, packet: DataPacket) {
        self.heard(to, from);
        if to == self.conns[packet.conn.0 as usize].dest {
            self.deliver(to, packet);
        } else {
            self.forward_data(to, Some(from), packet);
        }
    }

    fn deliver(&mut self, at: NodeId, packet: DataPacket) {
        let idx = packet.conn.0 as usize;
        assert_eq!(
            at, self.conns[idx].dest,
            "{} delivered to non-destination {at}",
            packet.conn
        );
        let flow = &mut self.flows[idx];
        if flow.delivered.insert(packet.seq) {
            self.ledger.record_received(packet.conn, packet.bits);
        }
        if flow.kind == FlowKind::Reliable {
            // acknowledgements ride an abstract return path with the same
            // latency as the forward trip
            let back = self.now() - packet.sent_at;
            self.schedule(
                back,
                Payload::Ack {
                    conn: packet.conn,
                    seq: packet.seq,
                    sent_at: packet.sent_at,
                },
            );
        }
    }

    /// Send `packet` one hop onward from `at`.
    pub(crate) fn forward_data(&mut self, at: NodeId, from: Option<NodeId>, mut packet: DataPacket) {
        let now = self.now();
        let idx = packet.conn.0 as usize;
        let (src, dest) = (self.conns[idx].src, self.conns[idx].dest);
        if packet.hops >= self.cfg.traffic.ttl {
            self.ledger.record_loss(LossReason::TtlExceeded);
            self.ledger.loop_alarms += 1;
            if self.cfg.record_log {
                self.ledger.log.push(LogRecord::LoopAlarm {
                    at: now,
                    conn: packet.conn,
                    node: at,
                });
            }
            return;
        }
        let key = self.route_key(dest, packet.conn);
        let next = match self.cfg.protocol {
            Protocol::Dsr => packet
                .route
                .as_ref()
                .filter(|r| r.get(packet.hops as usize) == Some(&at))
                .and_then(|r| r.get(packet.hops as usize + 1).copied()),
            _ => self.nodes[at.index()].table.lookup(&key, now).map(|e| e.next_hop),
        };
        let Some(next) = next else {
            self.ledger.record_loss(LossReason::NoRoute);
            if at == src {
                self.source_route_lost(packet.conn);
            } else if let Some(up) = from {
                self.report_no_route(at, up, packet.conn);
            }
            return;
        };
        if self.cfg.protocol != Protocol::Dsr {
            self.nodes[at.index()].table.touch(&key, now);
        }
        if !self.link(at, next) {
            self.ledger.record_loss(LossReason::LinkBreak);
            self.data_link_failed(at, next, &packet);
            return;
        }
        if !self.buckets[at.index()].admit(now, packet.bits) {
            self.ledger.record_loss(LossReason::Congestion);
            return;
        }
        if self.cfg.protocol != Protocol::Dsr {
            let until = now + self.cfg.routing.route_lifetime;
            let table = &mut self.nodes[at.index()].table;
            table.refresh(&key, now, until);
            if let Some(up) = from {
                table.add_precursor(&key, up);
            }
        }
        let rate = self.flows[idx].rate.max(1);
        let delay = hop_delay(packet.bits, rate, self.cfg.traffic.per_hop_latency);
        packet.hops += 1;
        self.schedule(
            delay,
            Payload::Data {
                from: at,
                to: next,
                packet,
            },
        );
    }

    /// Count whatever reliable traffic is still queued when the run ends.
    pub(crate) fn finish_flows(&mut self) {
        for flow in &self.flows {
            let pending = flow.reliable.outstanding.len() + flow.reliable.buffer.len();
            for _ in 0..pending {
                self.ledger.record_loss(LossReason::Unfinished);
            }
        }
    }
}
