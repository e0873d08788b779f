#![allow(dead_code)]

use manet::connection::{Kbps, Priority};
use manet::engine::SimTime;
use manet::network::{ConnectionSpec, Network, NetworkConfig};
use manet::rng::RngStream;
use manet::routing::Protocol;
use manet::traffic::FlowKind;
use manet::world::{Arena, MobilityConfig, NodeId, Position, World};

pub const RANGE: f64 = 250.0;

pub fn static_world(points: &[(f64, f64)]) -> World {
    let positions = points.iter().map(|&(x, y)| Position::new(x, y)).collect();
    World::new(
        Arena {
            width: 1000.0,
            height: 1000.0,
        },
        positions,
        vec![RANGE; points.len()],
        MobilityConfig::default(),
        RngStream::new(1, "mobility"),
    )
    .unwrap()
}

pub fn datagram(src: u32, dest: u32, bw: Kbps, start: f64, stop: f64) -> ConnectionSpec {
    ConnectionSpec {
        src: NodeId(src),
        dest: NodeId(dest),
        priority: Priority::Realtime,
        demanded_bw: bw,
        min_bw: bw / 2,
        kind: FlowKind::Datagram,
        start,
        stop: Some(stop),
    }
}

pub fn network(protocol: Protocol, points: &[(f64, f64)], specs: &[ConnectionSpec]) -> Network {
    network_with(NetworkConfig::new(protocol), points, specs)
}

pub fn network_with(cfg: NetworkConfig, points: &[(f64, f64)], specs: &[ConnectionSpec]) -> Network {
    let world = static_world(points);
    let caps = vec![11_000; points.len()];
    Network::new(cfg, world, caps, specs, &mut RngStream::new(1, "hello")).unwrap()
}

pub fn t(s: f64) -> SimTime {
    SimTime::from_secs(s)
}

/// Shortest hop counts from `src` over the disc graph, by breadth-first
/// search on pairwise distances.
pub fn bfs_hops(points: &[(f64, f64)], src: usize) -> Vec<Option<u32>> {
    let n = points.len();
    let mut dist = vec![None; n];
    dist[src] = Some(0);
    let mut queue = std::collections::VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            let (dx, dy) = (points[u].0 - points[v].0, points[u].1 - points[v].1);
            if v != u && dist[v].is_none() && (dx * dx + dy * dy).sqrt() <= RANGE {
                dist[v] = Some(dist[u].unwrap() + 1);
                queue.push_back(v);
            }
        }
    }
    dist
}
