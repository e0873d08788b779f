//! Scenario files: everything a run needs, in TOML, plus the expansion of
//! a scenario into concrete sweep cells.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::connection::{Kbps, ReestablishMode};
use crate::routing::{Protocol, RoutingConfig};
use crate::traffic::TrafficConfig;
use crate::world::{Arena, MobilityModel};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot parse scenario: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?} (expected fig3a, fig3b, fig4 or fig5)")]
    UnknownPreset(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ScenarioError> {
    Err(ScenarioError::Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MobilitySpec {
    #[serde(default)]
    pub model: MobilityModel,
    /// [v_min, v_max] in m/s. A speed sweep overrides it with [s, s].
    pub speed: [f64; 2],
    #[serde(default = "default_epoch")]
    pub epoch: f64,
}

fn default_epoch() -> f64 {
    10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RadioSection {
    pub range: f64,
    /// Per-node ranges; overrides `range` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapacitySection {
    pub kbps: Kbps,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_node: Option<Vec<Kbps>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowMix {
    Datagram,
    Reliable,
    /// Realtime connections use datagrams, bulk ones the reliable flow.
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectionsSection {
    /// Inclusive range the number of sources is drawn from per seed.
    pub sources: [usize; 2],
    #[serde(default = "default_per_source")]
    pub per_source: usize,
    pub realtime_fraction: f64,
    /// Demand is drawn uniformly from this kbps interval.
    pub demand_kbps: [Kbps; 2],
    #[serde(default = "default_min_fraction")]
    pub min_fraction: f64,
    pub flow: FlowMix,
    /// Start times are drawn uniformly from this window, seconds.
    #[serde(default = "default_start")]
    pub start: [f64; 2],
}

fn default_per_source() -> usize {
    2
}

fn default_min_fraction() -> f64 {
    0.5
}

fn default_start() -> [f64; 2] {
    [0.0, 5.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Speed,
    /// Demand level. Under `demand = "fixed"` every connection demands the
    /// level itself; under "upper_bound" demand is drawn from
    /// [demand_kbps[0], level].
    Bandwidth,
    NodeCount,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandLevel {
    #[default]
    Fixed,
    UpperBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: Axis,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    pub node_count: usize,
    pub duration: f64,
    pub protocols: Vec<Protocol>,
    /// Seeds to replicate every cell with.
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub reestablish: ReestablishMode,
    #[serde(default)]
    pub demand_level: DemandLevel,
    #[serde(default)]
    pub debug_invariants: bool,
    #[serde(default)]
    pub record_log: bool,
    #[serde(default)]
    pub arena: ArenaSection,
    pub mobility: MobilitySpec,
    pub radio: RadioSection,
    pub capacity: CapacitySection,
    pub connections: ConnectionsSection,
    #[serde(default)]
    pub traffic: TrafficConfig,
    #[serde(default)]
    pub routing: RoutingConfig,
    #[serde(default)]
    pub sweep: Vec<SweepSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArenaSection {
    pub width: f64,
    pub height: f64,
}

impl Default for ArenaSection {
    fn default() -> Self {
        let a = Arena::default();
        ArenaSection {
            width: a.width,
            height: a.height,
        }
    }
}

impl From<ArenaSection> for Arena {
    fn from(a: ArenaSection) -> Arena {
        Arena {
            width: a.width,
            height: a.height,
        }
    }
}

/// One point of a sweep: a protocol, a seed and the axis values.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub protocol: Protocol,
    pub seed: u64,
    pub node_count: usize,
    /// [v_min, v_max]
    pub speed: [f64; 2],
    /// Demand interval in kbps.
    pub demand: [Kbps; 2],
    /// Value reported in the CSV bandwidth column.
    pub bw_level: Kbps,
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = toml::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    pub fn preset(name: &str) -> Result<Scenario, ScenarioError> {
        let text = match name {
            "fig3a" => include_str!("../presets/fig3a.toml"),
            "fig3b" => include_str!("../presets/fig3b.toml"),
            "fig4" => include_str!("../presets/fig4.toml"),
            "fig5" => include_str!("../presets/fig5.toml"),
            other => return Err(ScenarioError::UnknownPreset(other.to_string())),
        };
        Scenario::from_toml(text)
    }

    pub const PRESETS: [&'static str; 4] = ["fig3a", "fig3b", "fig4", "fig5"];

    /// Short content hash of the canonical serialisation.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        let mut out = String::with_capacity(16);
        for b in &digest[..8] {
            write!(out, "{b:02x}").expect("writing to a string");
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.node_count < 2 {
            return invalid(format!("node_count must be at least 2, got {}", self.node_count));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return invalid(format!("duration must be positive, got {}", self.duration));
        }
        if self.protocols.is_empty() {
            return invalid("protocols must not be empty");
        }
        if self.seeds.is_empty() {
            return invalid("seeds must not be empty");
        }
        if !(self.arena.width > 0.0 && self.arena.height > 0.0) {
            return invalid("arena must have positive size");
        }
        let [lo, hi] = self.mobility.speed;
        if !(lo >= 0.0 && lo <= hi) {
            return invalid(format!("speed range [{lo}, {hi}] is invalid"));
        }
        if !(self.mobility.epoch > 0.0) {
            return invalid("mobility epoch must be positive");
        }
        if !(self.radio.range > 0.0) {
            return invalid("radio range must be positive");
        }
        if self.radio.ranges.as_ref().is_some_and(|r| r.iter().any(|x| !(*x > 0.0))) {
            return invalid("per-node ranges must be positive");
        }
        if self.capacity.kbps == 0 {
            return invalid("capacity must be positive");
        }
        let c = &self.connections;
        if c.sources[0] > c.sources[1] {
            return invalid("source range is reversed");
        }
        if c.per_source == 0 {
            return invalid("per_source must be at least 1");
        }
        if !(0.0..=1.0).contains(&c.realtime_fraction) {
            return invalid("realtime_fraction must be in [0, 1]");
        }
        if !(0.0..=1.0).contains(&c.min_fraction) {
            return invalid("min_fraction must be in [0, 1]");
        }
        if c.demand_kbps[0] == 0 || c.demand_kbps[0] > c.demand_kbps[1] {
            return invalid("demand_kbps must be a positive, ordered interval");
        }
        if !(c.start[0] >= 0.0 && c.start[0] <= c.start[1]) {
            return invalid("start window is invalid");
        }
        if self.traffic.packet_bits == 0 {
            return invalid("packet_bits must be positive");
        }
        let mut axes: Vec<Axis> = Vec::new();
        for sw in &self.sweep {
            if sw.values.is_empty() {
                return invalid(format!("{:?} sweep has no values", sw.axis));
            }
            if axes.contains(&sw.axis) {
                return invalid(format!("{:?} swept twice", sw.axis));
            }
            axes.push(sw.axis);
            for &v in &sw.values {
                let ok = match sw.axis {
                    Axis::Speed => v >= 0.0 && v.is_finite(),
                    Axis::Bandwidth => v >= 1.0 && v.fract() == 0.0,
                    Axis::NodeCount => v >= 2.0 && v.fract() == 0.0,
                };
                if !ok {
                    return invalid(format!("{:?} sweep value {v} is invalid", sw.axis));
                }
            }
        }
        for cell in self.cells() {
            self.check_cell(&cell)?;
        }
        Ok(())
    }

    fn check_cell(&self, cell: &Cell) -> Result<(), ScenarioError> {
        let c = &self.connections;
        if c.sources[1] > cell.node_count {
            return invalid(format!(
                "up to {} sources requested with only {} nodes",
                c.sources[1], cell.node_count
            ));
        }
        if c.per_source > cell.node_count - 1 {
            return invalid("per_source exceeds the number of possible destinations");
        }
        if cell.demand[0] > cell.demand[1] || cell.demand[0] == 0 {
            return invalid(format!("demand interval {:?} is invalid", cell.demand));
        }
        if let Some(r) = &self.radio.ranges {
            if r.len() != cell.node_count {
                return invalid("ranges must list one value per node");
            }
        }
        if let Some(p) = &self.capacity.per_node {
            if p.len() != cell.node_count {
                return invalid("per_node capacities must list one value per node");
            }
        }
        Ok(())
    }

    fn axis_values(&self, axis: Axis) -> Option<&[f64]> {
        self.sweep.iter().find(|s| s.axis == axis).map(|s| s.values.as_slice())
    }

    /// Every (protocol, node count, speed, demand, seed) combination, in a
    /// fixed order.
    pub fn cells(&self) -> Vec<Cell> {
        let counts: Vec<usize> = match self.axis_values(Axis::NodeCount) {
            Some(v) => v.iter().map(|&x| x as usize).collect(),
            None => vec![self.node_count],
        };
        let speeds: Vec<[f64; 2]> = match self.axis_values(Axis::Speed) {
            Some(v) => v.iter().map(|&s| [s, s]).collect(),
            None => vec![self.mobility.speed],
        };
        let [dlo, dhi] = self.connections.demand_kbps;
        let demands: Vec<([Kbps; 2], Kbps)> = match self.axis_values(Axis::Bandwidth) {
            Some(v) => v
                .iter()
                .map(|&x| {
                    let level = x as Kbps;
                    match self.demand_level {
                        DemandLevel::Fixed => ([level, level], level),
                        DemandLevel::UpperBound => ([dlo, level], level),
                    }
                })
                .collect(),
            None => vec![([dlo, dhi], dhi)],
        };
        let mut out = Vec::new();
        for &protocol in &self.protocols {
            for &node_count in &counts {
                for &(demand, bw_level) in &demands {
                    for &speed in &speeds {
                        for &seed in &self.seeds {
                            out.push(Cell {
                                protocol,
                                seed,
                                node_count,
                                speed,
                                demand,
                                bw_level,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}
