mod common;

use common::*;
use manet::connection::{ConnState, ConnectionId, TeardownReason};
use manet::engine::SimTime;
use manet::metrics::{self, ControlKind, LogRecord, LossReason, OverheadCounting};
use manet::network::NetworkConfig;
use manet::routing::{Protocol, RepairInitiator, RouteEntry, RouteKey};
use manet::world::{NodeId, Position};

// S=0, A=1, B=2, D=3 on a straight line, 200 m apart
const LINE: [(f64, f64); 4] = [(100.0, 500.0), (300.0, 500.0), (500.0, 500.0), (700.0, 500.0)];

// the line plus C=4, which bridges A and D around B
const DETOUR: [(f64, f64); 5] = [
    (100.0, 500.0),
    (300.0, 500.0),
    (500.0, 500.0),
    (700.0, 500.0),
    (500.0, 600.0),
];

fn ids(v: &[u32]) -> Vec<NodeId> {
    v.iter().map(|&i| NodeId(i)).collect()
}

#[test]
fn static_line_is_lossless_with_hand_counted_overhead() {
    for p in Protocol::ALL {
        let net = network(p, &LINE, &[datagram(0, 3, 1000, 1.0, 10.0)]);
        let (ledger, _) = net.finish(t(15.0));
        assert!(ledger.data_sent > 1000, "{p}");
        assert_eq!(metrics::pdr(&ledger), 1.0, "{p}");
        assert_eq!(ledger.connection_requests, 1, "{p}");
        // the source floods and the target replies: two messages created;
        // the request crosses S, A and B, the reply crosses D, B and A
        let c = &ledger.control;
        assert_eq!(c.originations(ControlKind::Rreq), 1, "{p}");
        assert_eq!(c.originations(ControlKind::Rrep), 1, "{p}");
        assert_eq!(c.transmissions(ControlKind::Rreq), 3, "{p}");
        assert_eq!(c.transmissions(ControlKind::Rrep), 3, "{p}");
        assert_eq!(c.originations(ControlKind::RouteFailure), 0, "{p}");
        let o = metrics::overhead_per_request(&ledger, OverheadCounting::Originations, false);
        let tx = metrics::overhead_per_request(&ledger, OverheadCounting::Transmissions, false);
        assert_eq!((o, tx), (2.0, 6.0), "{p}");
    }
}

#[test]
fn hello_overhead_is_opt_in() {
    let net = network(Protocol::Aodv, &LINE, &[datagram(0, 3, 1000, 1.0, 5.0)]);
    let (ledger, _) = net.finish(t(10.0));
    let hellos = ledger.control.originations(ControlKind::Hello);
    // four nodes beacon once a second
    assert!((36..=40).contains(&hellos), "{hellos}");
    let without = metrics::overhead_per_request(&ledger, OverheadCounting::Originations, false);
    let with = metrics::overhead_per_request(&ledger, OverheadCounting::Originations, true);
    assert_eq!(with - without, hellos as f64);
}

#[test]
fn discovered_route_is_the_line() {
    for p in Protocol::ALL {
        let mut net = network(p, &LINE, &[datagram(0, 3, 1000, 1.0, 5.0)]);
        net.run_until(t(3.0));
        let c = net.connection(ConnectionId(0));
        assert_eq!(c.state, ConnState::Active, "{p}");
        assert_eq!(c.route, ids(&[0, 1, 2, 3]), "{p}");
        assert_eq!(c.allocated_bw, 1000, "{p}");
    }
}

fn break_b(protocol: Protocol, cfg: Option<NetworkConfig>) -> manet::network::Network {
    let cfg = cfg.unwrap_or_else(|| NetworkConfig::new(protocol));
    let mut net = network_with(cfg, &DETOUR, &[datagram(0, 3, 500, 1.0, 20.0)]);
    net.run_until(t(3.0));
    assert_eq!(net.connection(ConnectionId(0)).route, ids(&[0, 1, 2, 3]));
    let now = net.now();
    net.world_mut().place(NodeId(2), Position::new(950.0, 50.0), now).unwrap();
    net.run_until(t(8.0));
    net
}

#[test]
fn new_repairs_locally_around_a_lost_relay() {
    let net = break_b(Protocol::New, None);
    let c = net.connection(ConnectionId(0));
    assert_eq!(c.state, ConnState::Active);
    assert_eq!(c.route, ids(&[0, 1, 4, 3]));
    // A repairs around B; stranded B also loses D, tries, fails and reports
    assert_eq!(net.stats().local_repairs, 2);
    // repairs are not source requests
    assert_eq!(net.ledger().connection_requests, 1);
    assert_eq!(net.ledger().control.originations(ControlKind::RouteFailure), 1);
    // B's grant is gone, C now carries the flow
    assert!(net.bandwidth().ledger(NodeId(2)).grant_of(c.id).is_none());
    assert!(net.bandwidth().ledger(NodeId(4)).grant_of(c.id).is_some());
}

#[test]
fn downstream_repair_mode_falls_back_to_the_source() {
    let mut cfg = NetworkConfig::new(Protocol::New);
    cfg.routing.repair_initiator = RepairInitiator::Downstream;
    let net = break_b(Protocol::New, Some(cfg));
    let c = net.connection(ConnectionId(0));
    assert_eq!(c.state, ConnState::Active);
    assert_eq!(c.route, ids(&[0, 1, 4, 3]));
}

#[test]
fn aodv_reports_the_break_and_the_source_rediscovers() {
    let net = break_b(Protocol::Aodv, None);
    let c = net.connection(ConnectionId(0));
    assert_eq!(c.state, ConnState::Active);
    assert_eq!(c.route, ids(&[0, 1, 4, 3]));
    assert_eq!(net.stats().local_repairs, 0);
    assert_eq!(net.ledger().connection_requests, 2);
    // A tells S; stranded B loses D and tells A, which it can no longer reach
    assert_eq!(net.ledger().control.originations(ControlKind::RouteFailure), 2);
}

#[test]
fn dsr_route_error_leads_to_a_new_route() {
    let net = break_b(Protocol::Dsr, None);
    let c = net.connection(ConnectionId(0));
    assert_eq!(c.state, ConnState::Active);
    assert_eq!(c.route, ids(&[0, 1, 4, 3]));
    assert!(net.ledger().control.originations(ControlKind::RouteFailure) >= 1);
}

#[test]
fn dsr_intermediate_node_answers_from_its_cache() {
    // five nodes in a row; B learns B,C,D first, then S asks for D
    let row = [(50.0, 500.0), (250.0, 500.0), (450.0, 500.0), (650.0, 500.0), (850.0, 500.0)];
    let specs = [datagram(2, 4, 500, 1.0, 10.0), datagram(0, 4, 500, 3.0, 10.0)];
    let mut net = network(Protocol::Dsr, &row, &specs);
    net.run_until(t(2.0));
    assert_eq!(net.ledger().control.originations(ControlKind::Rrep), 1);
    net.run_until(t(5.0));
    let c = net.connection(ConnectionId(1));
    assert_eq!(c.state, ConnState::Active);
    assert_eq!(c.route, ids(&[0, 1, 2, 3, 4]));
    // B replied; the request never reached D
    assert_eq!(net.ledger().control.originations(ControlKind::Rrep), 2);
    assert_eq!(net.ledger().control.transmissions(ControlKind::Rreq), 4 + 2);
}

fn wobble(out_for: f64) -> manet::network::Network {
    wobble_with(out_for, 20.0)
}

fn wobble_with(out_for: f64, active_window: f64) -> manet::network::Network {
    // traffic stops at 3 s, so only beacons can notice B leaving; the long
    // active window keeps the idle route watched
    let mut cfg = NetworkConfig::new(Protocol::New);
    cfg.routing.active_window = active_window;
    let mut net = network_with(cfg, &LINE, &[datagram(0, 3, 500, 1.0, 3.0)]);
    net.run_until(t(6.0));
    let now = net.now();
    net.world_mut().place(NodeId(2), Position::new(950.0, 50.0), now).unwrap();
    net.run_until(t(6.0 + out_for));
    let now = net.now();
    net.world_mut().place(NodeId(2), Position::new(500.0, 500.0), now).unwrap();
    net.run_until(t(15.0));
    net
}

#[test]
fn short_absence_is_not_a_link_loss() {
    let net = wobble(0.5);
    assert_eq!(net.stats().local_repairs, 0);
    assert_eq!(net.stats().discoveries, 1);
}

#[test]
fn long_absence_is_detected_by_beacons() {
    let net = wobble(4.0);
    assert!(net.stats().discoveries > 1);
}

#[test]
fn idle_routes_are_not_repaired() {
    // last data at 3 s, B leaves at 6 s: the route is no longer in use
    let net = wobble_with(4.0, 2.0);
    assert_eq!(net.stats().discoveries, 1);
    assert_eq!(net.ledger().control.originations(ControlKind::RouteFailure), 0);
}

#[test]
fn looping_tables_trip_the_ttl_alarm() {
    let mut cfg = NetworkConfig::new(Protocol::Aodv);
    cfg.record_log = true;
    let mut net = network_with(cfg, &LINE, &[datagram(0, 3, 500, 1.0, 4.0)]);
    net.run_until(t(2.0));
    assert!(net.find_loop().is_none());
    // A and B point at each other for D
    let key = RouteKey::new(NodeId(3), None);
    let expires_at = SimTime::from_secs(100.0);
    let last_used = net.now();
    for (at, next) in [(1, 2), (2, 1)] {
        net.node_mut(NodeId(at)).table.force(
            key,
            RouteEntry {
                dest: NodeId(3),
                next_hop: NodeId(next),
                hop_count: 2,
                dest_seq_no: 99,
                expires_at,
                valid: true,
                precursors: Vec::new(),
                last_used,
            },
        );
    }
    assert!(net.find_loop().is_some());
    net.run_until(t(3.0));
    let ledger = net.ledger();
    assert!(ledger.loop_alarms > 0);
    assert!(ledger.loss_count(LossReason::TtlExceeded) > 0);
    assert!(ledger.log.iter().any(|r| matches!(r, LogRecord::LoopAlarm { .. })));
}

#[test]
fn teardown_twice_counts_once_and_frees_every_grant() {
    let mut net = network(Protocol::New, &LINE, &[datagram(0, 3, 1000, 1.0, 10.0)]);
    net.run_until(t(3.0));
    let c = ConnectionId(0);
    assert_eq!(net.bandwidth().total_granted(c), 4);
    net.teardown(c, TeardownReason::Policy);
    net.teardown(c, TeardownReason::Policy);
    net.teardown(c, TeardownReason::Unreachable);
    assert_eq!(net.bandwidth().total_granted(c), 0);
    assert_eq!(net.connection(c).state, ConnState::Dropped);
    assert_eq!(net.ledger().teardown_count(TeardownReason::Policy), 1);
    assert_eq!(net.ledger().teardown_count(TeardownReason::Unreachable), 0);
    for i in 0..4 {
        assert_eq!(net.bandwidth().ledger(NodeId(i)).used(), 0);
    }
}

#[test]
fn unreachable_destination_fails_after_retries() {
    let far = [(100.0, 100.0), (300.0, 100.0), (900.0, 900.0)];
    let net = network(Protocol::Aodv, &far, &[datagram(0, 2, 500, 1.0, 10.0)]);
    let (ledger, _) = net.finish(t(10.0));
    assert_eq!(ledger.teardown_count(TeardownReason::Unreachable), 1);
    // initial attempt plus two retries
    assert_eq!(ledger.connection_requests, 3);
    assert_eq!(ledger.data_sent, 0);
}

#[test]
fn new_admission_caps_the_grant_at_the_tightest_node() {
    let mut cfg = NetworkConfig::new(Protocol::New);
    cfg.debug_invariants = true;
    let world = static_world(&LINE);
    let caps = vec![11_000, 11_000, 1_500, 11_000];
    let mut spec = datagram(0, 3, 2000, 1.0, 5.0);
    spec.min_bw = 1000;
    let mut net = manet::network::Network::new(
        cfg,
        world,
        caps,
        &[spec],
        &mut manet::rng::RngStream::new(1, "hello"),
    )
    .unwrap();
    net.run_until(t(3.0));
    let c = net.connection(ConnectionId(0));
    assert_eq!(c.state, ConnState::Active);
    assert_eq!(c.allocated_bw, 1500);
    for i in 0..4 {
        assert_eq!(net.bandwidth().ledger(NodeId(i)).grant_of(c.id).unwrap().bw, 1500);
    }
    assert!(net.stats().invariant_checks > 0);
}

