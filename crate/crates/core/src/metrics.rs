//! Run ledger and the three reported metrics: packet delivery ratio,
//! control-message overhead per connection request, and throughput.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::connection::{ConnectionId, Priority, TeardownReason};
use crate::engine::SimTime;
use crate::world::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    Rreq,
    Rrep,
    RouteFailure,
    Hello,
}

impl ControlKind {
    pub const ALL: [ControlKind; 4] = [
        ControlKind::Rreq,
        ControlKind::Rrep,
        ControlKind::RouteFailure,
        ControlKind::Hello,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// How the overhead numerator counts control traffic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverheadCounting {
    /// One per control message created by a node; relaying a received
    /// message onward does not count again.
    #[default]
    Originations,
    /// One per radio transmission, including every relay hop.
    Transmissions,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCounters {
    transmissions: [u64; 4],
    originations: [u64; 4],
}

impl ControlCounters {
    pub fn record_origination(&mut self, kind: ControlKind) {
        self.originations[kind.slot()] += 1;
    }

    pub fn record_transmission(&mut self, kind: ControlKind) {
        self.transmissions[kind.slot()] += 1;
    }

    pub fn transmissions(&self, kind: ControlKind) -> u64 {
        self.transmissions[kind.slot()]
    }

    pub fn originations(&self, kind: ControlKind) -> u64 {
        self.originations[kind.slot()]
    }

    pub fn total(&self, counting: OverheadCounting, include_hello: bool) -> u64 {
        let arr = match counting {
            OverheadCounting::Originations => &self.originations,
            OverheadCounting::Transmissions => &self.transmissions,
        };
        ControlKind::ALL
            .iter()
            .filter(|k| include_hello || **k != ControlKind::Hello)
            .map(|k| arr[k.slot()])
            .sum()
    }
}

/// Why a data packet never reached its destination.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossReason {
    /// Emitted while the source was re-discovering its route.
    Repairing,
    NoRoute,
    LinkBreak,
    Congestion,
    TtlExceeded,
    BufferOverflow,
    RetriesExhausted,
    /// Still queued or in flight when the run ended.
    Unfinished,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowStats {
    pub sent: u64,
    pub received: u64,
    pub bits_received: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoveryPurpose {
    Initial,
    /// Source-initiated re-discovery after a break or a failure report.
    Rediscovery,
    /// Repair launched by an on-path node on the source's behalf.
    LocalRepair,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    DiscoveryStarted {
        at: SimTime,
        conn: ConnectionId,
        priority: Priority,
        origin: NodeId,
        purpose: DiscoveryPurpose,
        batch: Option<u64>,
    },
    DiscoveryFinished {
        at: SimTime,
        conn: ConnectionId,
        batch: Option<u64>,
        success: bool,
    },
    PolicyDrop {
        at: SimTime,
        node: NodeId,
        victim: ConnectionId,
        victim_priority: Priority,
        incoming: ConnectionId,
        incoming_priority: Priority,
    },
    Teardown {
        at: SimTime,
        conn: ConnectionId,
        reason: TeardownReason,
    },
    LoopAlarm {
        at: SimTime,
        conn: ConnectionId,
        node: NodeId,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("throughput is undefined for a zero-length run")]
    ZeroDuration,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLedger {
    pub data_sent: u64,
    pub data_received: u64,
    pub bits_received: u64,
    pub control: ControlCounters,
    pub connection_requests: u64,
    pub teardowns: BTreeMap<TeardownReason, u64>,
    pub losses: BTreeMap<LossReason, u64>,
    pub per_connection: BTreeMap<ConnectionId, FlowStats>,
    pub loop_alarms: u64,
    pub run_duration: f64,
    pub log: Vec<LogRecord>,
}

impl MetricsLedger {
    pub fn record_sent(&mut self, conn: ConnectionId) {
        self.data_sent += 1;
        self.per_connection.entry(conn).or_default().sent += 1;
    }

    pub fn record_received(&mut self, conn: ConnectionId, bits: u64) {
        self.data_received += 1;
        self.bits_received += bits;
        let s = self.per_connection.entry(conn).or_default();
        s.received += 1;
        s.bits_received += bits;
    }

    pub fn record_loss(&mut self, reason: LossReason) {
        *self.losses.entry(reason).or_default() += 1;
    }

    pub fn record_teardown(&mut self, reason: TeardownReason) {
        *self.teardowns.entry(reason).or_default() += 1;
    }

    pub fn teardown_count(&self, reason: TeardownReason) -> u64 {
        self.teardowns.get(&reason).copied().unwrap_or(0)
    }

    pub fn loss_count(&self, reason: LossReason) -> u64 {
        self.losses.get(&reason).copied().unwrap_or(0)
    }

    pub fn control_sent(&self, counting: OverheadCounting, include_hello: bool) -> u64 {
        self.control.total(counting, include_hello)
    }

    /// Per-connection throughput in bits/s.
    pub fn connection_throughput(&self) -> Result<BTreeMap<ConnectionId, f64>, MetricsError> {
        if !(self.run_duration > 0.0) {
            return Err(MetricsError::ZeroDuration);
        }
        Ok(self
            .per_connection
            .iter()
            .map(|(&c, s)| (c, s.bits_received as f64 / self.run_duration))
            .collect())
    }
}

/// Delivered over sent; 1.0 for a run that sent nothing.
pub fn pdr(ledger: &MetricsLedger) -> f64 {
    if ledger.data_sent == 0 {
        1.0
    } else {
        ledger.data_received as f64 / ledger.data_sent as f64
    }
}

/// Control messages per source-initiated discovery; 0 when none happened.
pub fn overhead_per_request(
    ledger: &MetricsLedger,
    counting: OverheadCounting,
    include_hello: bool,
) -> f64 {
    if ledger.connection_requests == 0 {
        0.0
    } else {
        ledger.control_sent(counting, include_hello) as f64 / ledger.connection_requests as f64
    }
}

/// Network-wide delivered bits per simulated second.
pub fn throughput(ledger: &MetricsLedger) -> Result<f64, MetricsError> {
    if !(ledger.run_duration > 0.0) {
        return Err(MetricsError::ZeroDuration);
    }
    Ok(ledger.bits_received as f64 / ledger.run_duration)
}
