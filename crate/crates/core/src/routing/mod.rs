//! On-demand routing: AODV, a simplified DSR, and the multi-connection AODV
//! variant ("new") with local repair, admission-aware discovery and
//! priority-ordered re-establishment.
//!
//! The state machines here are driven synchronously by the network event
//! loop; every timer is an engine event.

mod cache;
mod dsr;
mod maintenance;
mod ondemand;
mod table;

use rustc_hash::FxHashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use cache::{is_cycle_free, RouteCache};
pub use table::{RouteEntry, RouteKey, RouteTable};

use crate::connection::ConnectionId;
use crate::metrics::{ControlKind, OverheadCounting};
use crate::world::NodeId;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Aodv,
    Dsr,
    New,
}

impl Protocol {
    pub const ALL: [Protocol; 3] = [Protocol::Aodv, Protocol::Dsr, Protocol::New];

    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Aodv => "aodv",
            Protocol::Dsr => "dsr",
            Protocol::New => "new",
        }
    }

    /// Whether routing entries are kept per connection rather than per
    /// destination.
    pub fn per_connection_routes(self) -> bool {
        self == Protocol::New
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "aodv" => Ok(Protocol::Aodv),
            "dsr" => Ok(Protocol::Dsr),
            "new" => Ok(Protocol::New),
            other => Err(format!("unknown protocol {other:?} (expected aodv, dsr or new)")),
        }
    }
}

/// Which surviving node starts a local repair after an on-path link break.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepairInitiator {
    /// The node on the source side of the break, which detected it.
    #[default]
    Upstream,
    /// The node on the destination side of the break.
    Downstream,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoutingConfig {
    pub hello_interval: f64,
    pub allowed_misses: u32,
    /// How long a discovery keeps accepting better replies after the first.
    pub reply_wait: f64,
    pub discovery_timeout: f64,
    /// Extra attempts after the first RREQ times out.
    pub rreq_retries: u32,
    /// Extra attempts for a repair started by an on-path node.
    pub repair_retries: u32,
    pub route_lifetime: f64,
    /// A route counts as in use for this long after it last carried data;
    /// only such routes are watched and repaired.
    pub active_window: f64,
    pub dsr_cache_capacity: usize,
    pub repair_initiator: RepairInitiator,
    /// Flood radius for RREQs, in hops.
    pub net_diameter: u32,
    /// Per-hop delay of control messages, seconds.
    pub control_hop_delay: f64,
    /// Minimum spacing between failure reports for the same route.
    pub failure_holdoff: f64,
    pub include_hello_overhead: bool,
    pub overhead_counting: OverheadCounting,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            hello_interval: 1.0,
            allowed_misses: 2,
            reply_wait: 0.5,
            discovery_timeout: 1.0,
            rreq_retries: 2,
            repair_retries: 0,
            route_lifetime: 30.0,
            active_window: 3.0,
            dsr_cache_capacity: 64,
            repair_initiator: RepairInitiator::Upstream,
            net_diameter: 32,
            control_hop_delay: 0.001,
            failure_holdoff: 1.0,
            include_hello_overhead: false,
            overhead_counting: OverheadCounting::Originations,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ControlMessage {
    pub kind: ControlKind,
    pub rreq_id: u32,
    pub origin: NodeId,
    pub target: NodeId,
    pub hop_count: u32,
    pub dest_seq_no: u32,
    /// Sequence number of the originator (RREQ only).
    pub origin_seq_no: u32,
    /// Remaining hops this message may still travel.
    pub ttl: u32,
    /// Accumulated route (DSR RREQ), full source route (DSR RREP), or the
    /// return path of a DSR route error.
    pub route: Vec<NodeId>,
    /// The broken link a DSR route error reports.
    pub broken_link: Option<(NodeId, NodeId)>,
    pub connection: Option<ConnectionId>,
}

impl ControlMessage {
    pub fn new(kind: ControlKind, origin: NodeId, target: NodeId) -> Self {
        ControlMessage {
            kind,
            rreq_id: 0,
            origin,
            target,
            hop_count: 0,
            dest_seq_no: 0,
            origin_seq_no: 0,
            ttl: 0,
            route: Vec::new(),
            broken_link: None,
            connection: None,
        }
    }
}

/// Per-node routing state.
#[derive(Clone, Debug)]
pub struct NodeRouting {
    pub id: NodeId,
    pub table: RouteTable,
    pub cache: RouteCache,
    pub seq_no: u32,
    next_rreq_id: u32,
    seen: FxHashSet<(NodeId, u32)>,
    /// Best hop count already answered per (origin, rreq_id) at a target.
    answered: Vec<((NodeId, u32), u32)>,
}

impl NodeRouting {
    pub fn new(id: NodeId, cache_capacity: usize) -> Self {
        NodeRouting {
            id,
            table: RouteTable::default(),
            cache: RouteCache::new(id, cache_capacity),
            seq_no: 0,
            next_rreq_id: 0,
            seen: FxHashSet::default(),
            answered: Vec::new(),
        }
    }

    pub fn next_rreq_id(&mut self) -> u32 {
        self.next_rreq_id += 1;
        self.next_rreq_id
    }

    /// Record that we handled `(origin, rreq_id)`; false if we already had.
    pub fn first_sighting(&mut self, origin: NodeId, rreq_id: u32) -> bool {
        self.seen.insert((origin, rreq_id))
    }

    /// Should the target answer this copy? Only the first copy of a request,
    /// or a later copy that arrived over strictly fewer hops.
    fn should_answer(&mut self, origin: NodeId, rreq_id: u32, hops: u32) -> bool {
        let key = (origin, rreq_id);
        match self.answered.iter_mut().find(|(k, _)| *k == key) {
            Some((_, best)) if hops >= *best => false,
            Some((_, best)) => {
                *best = hops;
                true
            }
            None => {
                if self.answered.len() > 256 {
                    self.answered.drain(..128);
                }
                self.answered.push((key, hops));
                true
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names_round_trip() {
        for p in Protocol::ALL {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("tora".parse::<Protocol>().is_err());
    }

    #[test]
    fn duplicate_rreqs_are_recognised() {
        let mut n = NodeRouting::new(NodeId(0), 4);
        assert!(n.first_sighting(NodeId(3), 1));
        assert!(!n.first_sighting(NodeId(3), 1));
        assert!(n.first_sighting(NodeId(3), 2));
    }

    #[test]
    fn target_answers_only_improving_copies() {
        let mut n = NodeRouting::new(NodeId(0), 4);
        assert!(n.should_answer(NodeId(3), 1, 4));
        assert!(!n.should_answer(NodeId(3), 1, 4));
        assert!(!n.should_answer(NodeId(3), 1, 5));
        assert!(n.should_answer(NodeId(3), 1, 3));
    }
}
