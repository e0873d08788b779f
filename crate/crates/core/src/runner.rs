//! Turning scenarios into runs, and runs into CSV rows.

use std::io;
use std::panic::{self, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::connection::Priority;
use crate::engine::SimTime;
use crate::metrics::{self, MetricsLedger};
use crate::network::{ConnectionSpec, Network, NetworkConfig, NetworkError, RunStats};
use crate::rng::RngStream;
use crate::scenario::{Cell, FlowMix, Scenario};
use crate::traffic::FlowKind;
use crate::world::{MobilityConfig, NodeId, World, WorldError};
use crate::connection::TeardownReason;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub const CSV_COLUMNS: [&str; 14] = [
    "scenario",
    "preset",
    "protocol",
    "seed",
    "node_count",
    "speed",
    "bw_demand",
    "pdr",
    "throughput_bps",
    "overhead_per_req",
    "overhead_incl_hello",
    "drops_policy",
    "drops_unreachable",
    "artifact_version",
];

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// One CSV row. Floats are pre-formatted so output is byte-stable.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: String,
    pub preset: String,
    pub protocol: String,
    pub seed: u64,
    pub node_count: usize,
    pub speed: String,
    pub bw_demand: u64,
    pub pdr: String,
    pub throughput_bps: String,
    pub overhead_per_req: String,
    pub overhead_incl_hello: String,
    pub drops_policy: u64,
    pub drops_unreachable: u64,
    pub artifact_version: String,
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: Cell,
    pub ledger: MetricsLedger,
    pub stats: RunStats,
}

impl CellResult {
    pub fn pdr(&self) -> f64 {
        metrics::pdr(&self.ledger)
    }

    pub fn throughput(&self) -> f64 {
        metrics::throughput(&self.ledger).expect("runs have positive duration")
    }

    pub fn overhead(&self, s: &Scenario, include_hello: bool) -> f64 {
        metrics::overhead_per_request(&self.ledger, s.routing.overhead_counting, include_hello)
    }

    pub fn row(&self, s: &Scenario, hash: &str) -> Row {
        Row {
            scenario: hash.to_string(),
            preset: s.name.clone(),
            protocol: self.cell.protocol.to_string(),
            seed: self.cell.seed,
            node_count: self.cell.node_count,
            speed: format!("{:.2}", self.cell.speed[1]),
            bw_demand: self.cell.bw_level,
            pdr: format!("{:.6}", self.pdr()),
            throughput_bps: format!("{:.1}", self.throughput()),
            overhead_per_req: format!(
                "{:.4}",
                self.overhead(s, s.routing.include_hello_overhead)
            ),
            overhead_incl_hello: format!("{:.4}", self.overhead(s, true)),
            drops_policy: self.ledger.teardown_count(TeardownReason::Policy),
            drops_unreachable: self.ledger.teardown_count(TeardownReason::Unreachable),
            artifact_version: ARTIFACT_VERSION.to_string(),
        }
    }
}

/// Draw the connection set for a cell. Only the seed, node count and
/// demand interval matter, so every protocol and speed sees the same
/// sources, destinations and demands.
pub fn draw_connections(s: &Scenario, cell: &Cell, rng: &mut RngStream) -> Vec<ConnectionSpec> {
    let c = &s.connections;
    let n = cell.node_count;
    let k = rng
        .draw_int(c.sources[0] as u64, c.sources[1] as u64)
        .expect("validated source range") as usize;
    let mut pool: Vec<u32> = (0..n as u32).collect();
    for i in 0..k {
        let j = i + rng.pick(n - i);
        pool.swap(i, j);
    }
    let sources: Vec<u32> = pool[..k].to_vec();
    let mut specs = Vec::with_capacity(k * c.per_source);
    for src in sources {
        let mut others: Vec<u32> = (0..n as u32).filter(|&x| x != src).collect();
        for i in 0..c.per_source {
            let j = i + rng.pick(others.len() - i);
            others.swap(i, j);
        }
        for &dest in &others[..c.per_source] {
            let priority = if rng.chance(c.realtime_fraction) {
                Priority::Realtime
            } else {
                Priority::Bulk
            };
            let u = rng.draw_uniform(0.0, 1.0).expect("unit interval");
            let [lo, hi] = cell.demand;
            let demanded_bw = lo + ((hi - lo) as f64 * u).round() as u64;
            let min_bw = ((demanded_bw as f64 * c.min_fraction).floor() as u64).min(demanded_bw);
            let kind = match (c.flow, priority) {
                (FlowMix::Datagram, _) | (FlowMix::Mixed, Priority::Realtime) => FlowKind::Datagram,
                (FlowMix::Reliable, _) | (FlowMix::Mixed, Priority::Bulk) => FlowKind::Reliable,
            };
            let start = rng.draw_uniform(c.start[0], c.start[1]).expect("validated window");
            specs.push(ConnectionSpec {
                src: NodeId(src),
                dest: NodeId(dest),
                priority,
                demanded_bw,
                min_bw,
                kind,
                start,
                stop: None,
            });
        }
    }
    specs
}

/// Build the network for one cell, ready to run from time zero.
pub fn build_network(s: &Scenario, cell: &Cell) -> Result<Network, RunError> {
    let n = cell.node_count;
    let mut placement = RngStream::new(cell.seed, "placement");
    let mut traffic = RngStream::new(cell.seed, "traffic");
    let mut hello = RngStream::new(cell.seed, "hello");
    let mobility = RngStream::new(cell.seed, "mobility");
    let ranges = s.radio.ranges.clone().unwrap_or_else(|| vec![s.radio.range; n]);
    let motion = MobilityConfig {
        model: s.mobility.model,
        v_min: cell.speed[0],
        v_max: cell.speed[1],
        epoch: s.mobility.epoch,
    };
    let world = World::scatter(s.arena.into(), n, ranges, motion, &mut placement, mobility)?;
    let capacities = s.capacity.per_node.clone().unwrap_or_else(|| vec![s.capacity.kbps; n]);
    let specs = draw_connections(s, cell, &mut traffic);
    let cfg = NetworkConfig {
        protocol: cell.protocol,
        routing: s.routing.clone(),
        traffic: s.traffic.clone(),
        reestablish: s.reestablish,
        debug_invariants: s.debug_invariants,
        check_loops: false,
        record_log: s.record_log,
    };
    Ok(Network::new(cfg, world, capacities, &specs, &mut hello)?)
}

pub fn run_cell(s: &Scenario, cell: &Cell) -> Result<CellResult, RunError> {
    let net = build_network(s, cell)?;
    let (ledger, stats) = net.finish(SimTime::from_secs(s.duration));
    Ok(CellResult {
        cell: cell.clone(),
        ledger,
        stats,
    })
}

/// Run the scenario once for a single protocol and seed with its default
/// (unswept) parameters.
pub fn run_scenario(
    s: &Scenario,
    protocol: crate::routing::Protocol,
    seed: u64,
) -> Result<CellResult, RunError> {
    let cell = Cell {
        protocol,
        seed,
        node_count: s.node_count,
        speed: s.mobility.speed,
        demand: s.connections.demand_kbps,
        bw_level: s.connections.demand_kbps[1],
    };
    run_cell(s, &cell)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FailedCell {
    pub cell: Cell,
    pub error: String,
}

#[derive(Clone, Debug, Default)]
pub struct SweepReport {
    pub results: Vec<CellResult>,
    pub failed: Vec<FailedCell>,
}

impl SweepReport {
    pub fn rows(&self, s: &Scenario) -> Vec<Row> {
        let hash = s.hash();
        self.results.iter().map(|r| r.row(s, &hash)).collect()
    }
}

/// Run every cell of the scenario in order. A cell that errors or panics
/// is recorded in the report; the others still run.
pub fn run_sweep(s: &Scenario) -> SweepReport {
    run_cells(s, &s.cells())
}

pub fn run_cells(s: &Scenario, cells: &[Cell]) -> SweepReport {
    let mut report = SweepReport::default();
    for cell in cells {
        let outcome = panic::catch_unwind(AssertUnwindSafe(|| run_cell(s, cell)));
        match outcome {
            Ok(Ok(r)) => report.results.push(r),
            Ok(Err(e)) => report.failed.push(FailedCell {
                cell: cell.clone(),
                error: e.to_string(),
            }),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panic".to_string());
                report.failed.push(FailedCell {
                    cell: cell.clone(),
                    error: msg,
                });
            }
        }
    }
    report
}

pub fn write_csv<W: io::Write>(out: W, rows: &[Row]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    if rows.is_empty() {
        w.write_record(CSV_COLUMNS)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: io::Read>(input: R) -> Result<Vec<Row>, csv::Error> {
    csv::Reader::from_reader(input).deserialize().collect()
}
