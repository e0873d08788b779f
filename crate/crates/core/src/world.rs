//! Node placement, mobility, and disc-model connectivity.
//!
//! Positions are evaluated lazily from the state at the start of each node's
//! current motion segment, so queries between events never accumulate
//! tick-discretization error. Segments end at mobility epoch boundaries,
//! where a new heading and speed are drawn.

use std::cell::RefCell;
use std::f64::consts::TAU;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::SimTime;
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

impl NodeId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub fn new(x: f64, y: f64) -> Self {
        Position { x, y }
    }

    pub fn distance(&self, other: &Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn within(&self, other: &Position, range: f64) -> bool {
        let (dx, dy) = (self.x - other.x, self.y - other.y);
        dx * dx + dy * dy <= range * range
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arena {
    pub width: f64,
    pub height: f64,
}

impl Arena {
    pub fn contains(&self, p: &Position) -> bool {
        (0.0..=self.width).contains(&p.x) && (0.0..=self.height).contains(&p.y)
    }
}

impl Default for Arena {
    fn default() -> Self {
        Arena {
            width: 1000.0,
            height: 1000.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MobilityModel {
    /// Heading and speed redrawn every epoch; reflect off the arena walls.
    #[default]
    RandomDirection,
    /// Travel to a uniformly drawn waypoint; a new one is drawn on arrival.
    RandomWaypoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityConfig {
    pub model: MobilityModel,
    pub v_min: f64,
    pub v_max: f64,
    /// Seconds between heading/speed redraws (random direction), or the
    /// pause-free fallback segment length for a stationary waypoint node.
    pub epoch: f64,
}

impl Default for MobilityConfig {
    fn default() -> Self {
        MobilityConfig {
            model: MobilityModel::RandomDirection,
            v_min: 0.0,
            v_max: 0.0,
            epoch: 10.0,
        }
    }
}

/// Heading and speed of one node for its current epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MobilityState {
    /// Radians in [0, 2pi).
    pub direction: f64,
    pub speed: f64,
    pub epoch_ends_at: SimTime,
}

/// Static per-node radio.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadioSpec {
    pub range: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum WorldError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("link query from {0} to itself")]
    SelfLink(NodeId),
    #[error("mobility step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Debug)]
struct Motion {
    anchor: Position,
    anchor_time: SimTime,
    state: MobilityState,
    // speed * (cos, sin) of the current direction
    velocity: (f64, f64),
}

fn velocity(state: &MobilityState) -> (f64, f64) {
    (state.speed * state.direction.cos(), state.speed * state.direction.sin())
}

#[derive(Debug, Default)]
struct PositionCache {
    at: Option<SimTime>,
    generation: u64,
    positions: Vec<Position>,
}

pub struct World {
    arena: Arena,
    radios: Vec<RadioSpec>,
    motions: Vec<Motion>,
    mobility: MobilityConfig,
    rng: RngStream,
    generation: u64,
    cache: RefCell<PositionCache>,
}

impl World {
    /// Build a world with explicit initial positions. The first heading and
    /// speed of each node are drawn from `rng` at time zero.
    pub fn new(
        arena: Arena,
        positions: Vec<Position>,
        ranges: Vec<f64>,
        mobility: MobilityConfig,
        rng: RngStream,
    ) -> Result<World, WorldError> {
        if !(arena.width > 0.0 && arena.height > 0.0) {
            return Err(WorldError::InvalidConfig(format!(
                "arena must have positive size, got {}x{}",
                arena.width, arena.height
            )));
        }
        if positions.len() != ranges.len() {
            return Err(WorldError::InvalidConfig(format!(
                "{} positions but {} ranges",
                positions.len(),
                ranges.len()
            )));
        }
        if let Some(p) = positions.iter().find(|p| !arena.contains(p)) {
            return Err(WorldError::InvalidConfig(format!(
                "position ({}, {}) outside arena",
                p.x, p.y
            )));
        }
        if ranges.iter().any(|r| !(*r > 0.0)) {
            return Err(WorldError::InvalidConfig("ranges must be positive".into()));
        }
        if !(mobility.v_min >= 0.0 && mobility.v_min <= mobility.v_max) {
            return Err(WorldError::InvalidConfig(format!(
                "speed range [{}, {}] is invalid",
                mobility.v_min, mobility.v_max
            )));
        }
        if !(mobility.epoch > 0.0) {
            return Err(WorldError::InvalidConfig("mobility epoch must be positive".into()));
        }
        let mut world = World {
            arena,
            radios: ranges.into_iter().map(|range| RadioSpec { range }).collect(),
            motions: Vec::with_capacity(positions.len()),
            mobility,
            rng,
            generation: 0,
            cache: RefCell::new(PositionCache::default()),
        };
        for anchor in positions {
            let state = world.draw_state(anchor, SimTime::ZERO);
            world.motions.push(Motion {
                anchor,
                anchor_time: SimTime::ZERO,
                velocity: velocity(&state),
                state,
            });
        }
        Ok(world)
    }

    /// Uniformly scatter `count` nodes over the arena using `placement`.
    pub fn scatter(
        arena: Arena,
        count: usize,
        ranges: Vec<f64>,
        mobility: MobilityConfig,
        placement: &mut RngStream,
        rng: RngStream,
    ) -> Result<World, WorldError> {
        let positions = (0..count)
            .map(|_| {
                let x = placement.draw_uniform(0.0, arena.width).expect("positive width");
                let y = placement.draw_uniform(0.0, arena.height).expect("positive height");
                Position::new(x, y)
            })
            .collect();
        World::new(arena, positions, ranges, mobility, rng)
    }

    /// Override the current heading and speed of a node (scripted scenarios).
    pub fn set_motion(
        &mut self,
        node: NodeId,
        direction: f64,
        speed: f64,
        epoch_ends_at: SimTime,
    ) -> Result<(), WorldError> {
        let m = self.motion_mut(node)?;
        m.state = MobilityState {
            direction: direction.rem_euclid(TAU),
            speed,
            epoch_ends_at,
        };
        m.velocity = velocity(&m.state);
        self.generation += 1;
        Ok(())
    }

    /// Teleport a node (scripted scenarios only).
    pub fn place(&mut self, node: NodeId, at: Position, now: SimTime) -> Result<(), WorldError> {
        if !self.arena.contains(&at) {
            return Err(WorldError::InvalidConfig("placement outside arena".into()));
        }
        let m = self.motion_mut(node)?;
        m.anchor = at;
        m.anchor_time = now;
        self.generation += 1;
        Ok(())
    }

    pub fn arena(&self) -> Arena {
        self.arena
    }

    pub fn node_count(&self) -> usize {
        self.motions.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeId> {
        (0..self.motions.len() as u32).map(NodeId)
    }

    pub fn range(&self, node: NodeId) -> Result<f64, WorldError> {
        self.radios
            .get(node.index())
            .map(|r| r.range)
            .ok_or(WorldError::UnknownNode(node))
    }

    pub fn mobility_state(&self, node: NodeId) -> Result<MobilityState, WorldError> {
        Ok(self.motion(node)?.state)
    }

    /// Advance `node` by `dt` seconds of motion, redrawing heading and speed
    /// at every epoch boundary crossed on the way.
    pub fn step_mobility(&mut self, node: NodeId, dt: f64) -> Result<Position, WorldError> {
        if !(dt > 0.0) {
            return Err(WorldError::InvalidStep(dt));
        }
        self.motion(node)?;
        let end = self.motion(node)?.anchor_time + dt;
        loop {
            let m = &self.motions[node.index()];
            let seg_end = m.state.epoch_ends_at.min(end);
            let (pos, dir) = self.project(m, seg_end);
            let boundary = seg_end >= m.state.epoch_ends_at;
            let m = &mut self.motions[node.index()];
            m.anchor = pos;
            m.anchor_time = seg_end;
            if m.state.direction != dir {
                m.state.direction = dir;
                m.velocity = velocity(&m.state);
            }
            if boundary {
                let state = self.draw_state(pos, seg_end);
                let m = &mut self.motions[node.index()];
                m.velocity = velocity(&state);
                m.state = state;
            }
            if seg_end >= end {
                break;
            }
        }
        self.generation += 1;
        Ok(self.motions[node.index()].anchor)
    }

    /// Bring the node's motion segment up to `t` (a no-op if already there).
    pub fn advance_to(&mut self, node: NodeId, t: SimTime) -> Result<Position, WorldError> {
        let m = self.motion(node)?;
        let dt = t - m.anchor_time;
        if dt > 0.0 {
            self.step_mobility(node, dt)
        } else {
            Ok(m.anchor)
        }
    }

    /// When the node's current epoch ends.
    pub fn epoch_end(&self, node: NodeId) -> Result<SimTime, WorldError> {
        Ok(self.motion(node)?.state.epoch_ends_at)
    }

    pub fn position_at(&self, node: NodeId, t: SimTime) -> Result<Position, WorldError> {
        let m = self.motion(node)?;
        Ok(self.project(m, t).0)
    }

    /// True iff `b` lies within `a`'s transmission range at `t` (boundary
    /// inclusive). Not symmetric when ranges differ.
    pub fn can_transmit(&self, a: NodeId, b: NodeId, t: SimTime) -> Result<bool, WorldError> {
        if a == b {
            return Err(WorldError::SelfLink(a));
        }
        let range = self.range(a)?;
        self.motion(b)?;
        self.with_positions(t, |pos| pos[a.index()].within(&pos[b.index()], range))
    }

    /// Every node `a` can reach at `t`, in ascending id order.
    pub fn neighbors(&self, a: NodeId, t: SimTime) -> Result<Vec<NodeId>, WorldError> {
        let range = self.range(a)?;
        self.with_positions(t, |pos| {
            let pa = pos[a.index()];
            pos.iter()
                .enumerate()
                .filter(|&(i, p)| i != a.index() && pa.within(p, range))
                .map(|(i, _)| NodeId(i as u32))
                .collect()
        })
    }

    fn with_positions<R>(&self, t: SimTime, f: impl FnOnce(&[Position]) -> R) -> Result<R, WorldError> {
        let mut cache = self.cache.borrow_mut();
        if cache.at != Some(t) || cache.generation != self.generation {
            let positions = self.motions.iter().map(|m| self.project(m, t).0).collect();
            cache.positions = positions;
            cache.at = Some(t);
            cache.generation = self.generation;
        }
        Ok(f(&cache.positions))
    }

    fn motion(&self, node: NodeId) -> Result<&Motion, WorldError> {
        self.motions.get(node.index()).ok_or(WorldError::UnknownNode(node))
    }

    fn motion_mut(&mut self, node: NodeId) -> Result<&mut Motion, WorldError> {
        self.motions.get_mut(node.index()).ok_or(WorldError::UnknownNode(node))
    }

    /// Position and heading at `t` within the current segment.
    fn project(&self, m: &Motion, t: SimTime) -> (Position, f64) {
        let dt = t - m.anchor_time;
        debug_assert!(dt >= -1e-9, "position queried before segment start");
        let dt = dt.max(0.0);
        let s = m.state.speed;
        if s == 0.0 || dt == 0.0 {
            return (m.anchor, m.state.direction);
        }
        let (vx, vy) = m.velocity;
        let (x, flip_x) = reflect(m.anchor.x + vx * dt, self.arena.width);
        let (y, flip_y) = reflect(m.anchor.y + vy * dt, self.arena.height);
        let vx = if flip_x { -vx } else { vx };
        let vy = if flip_y { -vy } else { vy };
        let dir = if flip_x || flip_y {
            vy.atan2(vx).rem_euclid(TAU)
        } else {
            m.state.direction
        };
        (Position::new(x, y), dir)
    }

    fn draw_state(&mut self, from: Position, now: SimTime) -> MobilityState {
        let cfg = self.mobility;
        let speed = self
            .rng
            .draw_uniform(cfg.v_min, cfg.v_max)
            .expect("validated speed range");
        match cfg.model {
            MobilityModel::RandomDirection => {
                let direction = self.rng.draw_uniform(0.0, TAU).expect("non-empty");
                MobilityState {
                    direction,
                    speed,
                    epoch_ends_at: now + cfg.epoch,
                }
            }
            MobilityModel::RandomWaypoint => {
                let x = self.rng.draw_uniform(0.0, self.arena.width).expect("non-empty");
                let y = self.rng.draw_uniform(0.0, self.arena.height).expect("non-empty");
                let target = Position::new(x, y);
                let dist = from.distance(&target);
                if speed == 0.0 || dist == 0.0 {
                    return MobilityState {
                        direction: 0.0,
                        speed: 0.0,
                        epoch_ends_at: now + cfg.epoch,
                    };
                }
                MobilityState {
                    direction: (target.y - from.y).atan2(target.x - from.x).rem_euclid(TAU),
                    speed,
                    epoch_ends_at: now + dist / speed,
                }
            }
        }
    }
}

/// Fold an unbounded coordinate back into `[0, len]` by mirror reflection.
/// Returns the folded coordinate and whether the velocity ends up reversed.
fn reflect(u: f64, len: f64) -> (f64, bool) {
    if (0.0..len).contains(&u) {
        return (u, false);
    }
    let period = 2.0 * len;
    let m = u.rem_euclid(period);
    let folds = (u / len).floor() as i64;
    let x = if m <= len { m } else { period - m };
    (x.clamp(0.0, len), folds.rem_euclid(2) == 1)
}
