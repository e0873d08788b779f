//! Multiple simultaneous connections per node: per-node bandwidth ledgers,
//! admission with renegotiation, the priority-aware drop policy, and
//! priority-ordered route re-establishment.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::NodeId;

/// Bandwidth in kbps.
pub type Kbps = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ConnectionId(pub u32);

impl fmt::Display for ConnectionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

/// Traffic class. Ordering is significant: `Bulk < Realtime`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Priority {
    Bulk,
    Realtime,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnState {
    Discovering,
    Active,
    Repairing,
    Dropped,
    Failed,
}

impl ConnState {
    pub fn is_live(self) -> bool {
        matches!(self, ConnState::Active | ConnState::Repairing)
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, ConnState::Dropped | ConnState::Failed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeardownReason {
    /// Evicted by the drop policy to make room for a higher-priority flow.
    Policy,
    /// No route could be found within the retry budget.
    Unreachable,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConnectionError {
    #[error("minimum bandwidth {min} exceeds demand {demanded}")]
    MinAboveDemand { min: Kbps, demanded: Kbps },
    #[error("connection endpoints must differ ({0})")]
    SelfConnection(NodeId),
    #[error("{0} already holds a grant at this node")]
    AlreadyGranted(ConnectionId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Connection {
    pub id: ConnectionId,
    pub src: NodeId,
    pub dest: NodeId,
    pub priority: Priority,
    pub demanded_bw: Kbps,
    pub min_bw: Kbps,
    pub allocated_bw: Kbps,
    pub state: ConnState,
    /// Nodes currently holding a grant for this connection, source first.
    pub route: Vec<NodeId>,
}

impl Connection {
    pub fn new(
        id: ConnectionId,
        src: NodeId,
        dest: NodeId,
        priority: Priority,
        demanded_bw: Kbps,
        min_bw: Kbps,
    ) -> Result<Self, ConnectionError> {
        if src == dest {
            return Err(ConnectionError::SelfConnection(src));
        }
        if min_bw > demanded_bw {
            return Err(ConnectionError::MinAboveDemand {
                min: min_bw,
                demanded: demanded_bw,
            });
        }
        Ok(Connection {
            id,
            src,
            dest,
            priority,
            demanded_bw,
            min_bw,
            allocated_bw: 0,
            state: ConnState::Discovering,
            route: Vec::new(),
        })
    }

    pub fn request(&self) -> AdmissionRequest {
        AdmissionRequest {
            conn: self.id,
            priority: self.priority,
            demanded: self.demanded_bw,
            min: self.min_bw,
        }
    }

    /// `min_bw <= allocated_bw <= demanded_bw` while active, zero otherwise.
    pub fn allocation_valid(&self) -> bool {
        match self.state {
            ConnState::Active => {
                self.min_bw <= self.allocated_bw && self.allocated_bw <= self.demanded_bw
            }
            _ => self.allocated_bw == 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdmissionRequest {
    pub conn: ConnectionId,
    pub priority: Priority,
    pub demanded: Kbps,
    pub min: Kbps,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Admission {
    Granted(Kbps),
    Renegotiated(Kbps),
    Rejected,
}

impl Admission {
    pub fn bandwidth(self) -> Option<Kbps> {
        match self {
            Admission::Granted(bw) | Admission::Renegotiated(bw) => Some(bw),
            Admission::Rejected => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdmitOutcome {
    pub decision: Admission,
    /// Connections evicted at this node to make room. The caller must tear
    /// them down everywhere else.
    pub dropped: Vec<ConnectionId>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grant {
    pub bw: Kbps,
    pub priority: Priority,
}

/// One drop candidate: a granted connection, its class, and its grant.
pub type DropCandidate = (ConnectionId, Priority, Kbps);

/// Pick connections to evict so that at least `needed` kbps are freed.
///
/// Only connections of strictly lower priority than `incoming` are eligible.
/// They are taken lowest priority first, largest grant first, then by id,
/// until enough is freed. Returns an empty set when even evicting every
/// candidate would not free `needed`.
pub fn select_drops(
    candidates: &[DropCandidate],
    needed: Kbps,
    incoming: Priority,
) -> Vec<ConnectionId> {
    if needed == 0 {
        return Vec::new();
    }
    let mut eligible: Vec<DropCandidate> = candidates
        .iter()
        .copied()
        .filter(|&(_, p, _)| p < incoming)
        .collect();
    eligible.sort_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2)).then(a.0.cmp(&b.0)));
    let mut freed = 0;
    let mut chosen = Vec::new();
    for (id, _, bw) in eligible {
        if freed >= needed {
            break;
        }
        freed += bw;
        chosen.push(id);
    }
    if freed >= needed {
        chosen
    } else {
        Vec::new()
    }
}

/// Per-node record of bandwidth handed out to connections.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeBandwidthLedger {
    capacity: Kbps,
    grants: BTreeMap<ConnectionId, Grant>,
}

impl NodeBandwidthLedger {
    pub fn new(capacity: Kbps) -> Self {
        NodeBandwidthLedger {
            capacity,
            grants: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> Kbps {
        self.capacity
    }

    pub fn used(&self) -> Kbps {
        self.grants.values().map(|g| g.bw).sum()
    }

    pub fn free(&self) -> Kbps {
        self.capacity.saturating_sub(self.used())
    }

    pub fn grant_of(&self, conn: ConnectionId) -> Option<Grant> {
        self.grants.get(&conn).copied()
    }

    pub fn grants(&self) -> impl Iterator<Item = (ConnectionId, Grant)> + '_ {
        self.grants.iter().map(|(&c, &g)| (c, g))
    }

    /// Insert a grant directly, bypassing policy (tests and fixtures).
    pub fn insert_grant(&mut self, conn: ConnectionId, grant: Grant) {
        self.grants.insert(conn, grant);
        debug_assert!(self.conserves());
    }

    pub fn conserves(&self) -> bool {
        self.used() <= self.capacity
    }

    fn candidates(&self, excluding: ConnectionId) -> Vec<DropCandidate> {
        self.grants
            .iter()
            .filter(|(&c, _)| c != excluding)
            .map(|(&c, g)| (c, g.priority, g.bw))
            .collect()
    }

    pub fn select_drops(&self, needed: Kbps, incoming: Priority) -> Vec<ConnectionId> {
        select_drops(&self.candidates(ConnectionId(u32::MAX)), needed, incoming)
    }

    /// Would `admit` succeed if `req.conn`'s existing grant here (if any)
    /// were released first? Pure; used to prune route discovery.
    pub fn probe(&self, req: &AdmissionRequest) -> bool {
        let own = self.grant_of(req.conn).map_or(0, |g| g.bw);
        let free = self.free() + own;
        if free >= req.min {
            return true;
        }
        !select_drops(&self.candidates(req.conn), req.min - free, req.priority).is_empty()
    }

    pub fn admit(&mut self, req: &AdmissionRequest) -> Result<AdmitOutcome, ConnectionError> {
        if self.grants.contains_key(&req.conn) {
            return Err(ConnectionError::AlreadyGranted(req.conn));
        }
        let free = self.free();
        let mut dropped = Vec::new();
        let available = if free >= req.min {
            free
        } else {
            let victims = self.select_drops(req.min - free, req.priority);
            if victims.is_empty() {
                return Ok(AdmitOutcome {
                    decision: Admission::Rejected,
                    dropped,
                });
            }
            for v in &victims {
                self.grants.remove(v);
            }
            dropped = victims;
            self.free()
        };
        let decision = if available >= req.demanded {
            Admission::Granted(req.demanded)
        } else {
            Admission::Renegotiated(available)
        };
        let bw = decision.bandwidth().expect("granted");
        self.grants.insert(
            req.conn,
            Grant {
                bw,
                priority: req.priority,
            },
        );
        debug_assert!(self.conserves());
        Ok(AdmitOutcome { decision, dropped })
    }

    pub fn release(&mut self, conn: ConnectionId) -> Option<Kbps> {
        self.grants.remove(&conn).map(|g| g.bw)
    }

    /// Lower an existing grant to `bw` (never raises it).
    pub fn trim(&mut self, conn: ConnectionId, bw: Kbps) {
        if let Some(g) = self.grants.get_mut(&conn) {
            g.bw = g.bw.min(bw);
        }
    }
}

/// The ledgers of every node in the network.
#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthBook {
    ledgers: Vec<NodeBandwidthLedger>,
}

impl BandwidthBook {
    pub fn new(capacities: impl IntoIterator<Item = Kbps>) -> Self {
        BandwidthBook {
            ledgers: capacities.into_iter().map(NodeBandwidthLedger::new).collect(),
        }
    }

    pub fn ledger(&self, node: NodeId) -> &NodeBandwidthLedger {
        &self.ledgers[node.index()]
    }

    pub fn ledger_mut(&mut self, node: NodeId) -> &mut NodeBandwidthLedger {
        &mut self.ledgers[node.index()]
    }

    /// Release the grants `conn` holds at each node of `route`. Returns how
    /// many ledgers actually held one.
    pub fn release_route(&mut self, conn: ConnectionId, route: &[NodeId]) -> usize {
        route
            .iter()
            .filter(|n| self.ledgers[n.index()].release(conn).is_some())
            .count()
    }

    /// Nodes whose grants exceed capacity (empty when conservation holds).
    pub fn violations(&self) -> Vec<NodeId> {
        self.ledgers
            .iter()
            .enumerate()
            .filter(|(_, l)| !l.conserves())
            .map(|(i, _)| NodeId(i as u32))
            .collect()
    }

    pub fn total_granted(&self, conn: ConnectionId) -> usize {
        self.ledgers.iter().filter(|l| l.grant_of(conn).is_some()).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReestablishMode {
    #[default]
    Serial,
    Parallel,
}

/// Order in which a moved node re-establishes its connections: realtime
/// before bulk, then ascending id.
pub fn reestablish_order(conns: &[(ConnectionId, Priority)]) -> Vec<ConnectionId> {
    let mut v = conns.to_vec();
    v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    v.into_iter().map(|(c, _)| c).collect()
}

/// A batch of re-establishments launched by one node after it moved.
///
/// In serial mode the next discovery is released only when the previous one
/// completes; in parallel mode everything is released at once.
#[derive(Clone, Debug, PartialEq)]
pub struct ReestablishBatch {
    pub id: u64,
    pub node: NodeId,
    pub mode: ReestablishMode,
    waiting: VecDeque<ConnectionId>,
    in_flight: BTreeSet<ConnectionId>,
}

impl ReestablishBatch {
    /// Create the batch and return the discoveries to launch immediately.
    pub fn start(
        id: u64,
        node: NodeId,
        mode: ReestablishMode,
        conns: &[(ConnectionId, Priority)],
    ) -> (Self, Vec<ConnectionId>) {
        let mut batch = ReestablishBatch {
            id,
            node,
            mode,
            waiting: reestablish_order(conns).into(),
            in_flight: BTreeSet::new(),
        };
        let launch = batch.release();
        (batch, launch)
    }

    fn release(&mut self) -> Vec<ConnectionId> {
        let mut out = Vec::new();
        match self.mode {
            ReestablishMode::Parallel => out.extend(self.waiting.drain(..)),
            ReestablishMode::Serial => {
                if self.in_flight.is_empty() {
                    out.extend(self.waiting.pop_front());
                }
            }
        }
        self.in_flight.extend(out.iter().copied());
        out
    }

    /// Mark `conn` done (success or failure) and return what to launch next.
    pub fn complete(&mut self, conn: ConnectionId) -> Vec<ConnectionId> {
        if !self.in_flight.remove(&conn) {
            // not launched yet: drop it from the queue
            self.waiting.retain(|&c| c != conn);
            return Vec::new();
        }
        self.release()
    }

    pub fn contains(&self, conn: ConnectionId) -> bool {
        self.in_flight.contains(&conn) || self.waiting.contains(&conn)
    }

    pub fn is_waiting(&self, conn: ConnectionId) -> bool {
        self.waiting.contains(&conn)
    }

    pub fn is_done(&self) -> bool {
        self.waiting.is_empty() && self.in_flight.is_empty()
    }
}
