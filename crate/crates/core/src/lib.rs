//! Discrete-event simulator for mobile ad-hoc routing with multiple
//! prioritised connections per node.

pub mod connection;
pub mod engine;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod routing;
pub mod runner;
pub mod scenario;
pub mod traffic;
pub mod world;
