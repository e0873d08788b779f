//! End-to-end acceptance checks. Runs as a plain binary: one PASS/FAIL
//! line per criterion, nonzero exit if any fails. An optional argument
//! restricts the run to criteria whose name contains it.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::time::Instant;

use common::*;
use manet::connection::{select_drops, ConnectionId, DropCandidate, Priority, ReestablishMode};
use manet::metrics::{self, LogRecord, OverheadCounting};
use manet::rng::RngStream;
use manet::routing::Protocol;
use manet::runner::{run_cells, write_csv, CellResult, SweepReport};
use manet::scenario::{Cell, Scenario};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Invariant checks and failed cells seen across every preset run made here.
#[derive(Default)]
struct Books {
    runs: usize,
    checks: u64,
    failed: Vec<String>,
}

impl Books {
    fn absorb(&mut self, name: &str, report: &SweepReport) {
        self.runs += report.results.len() + report.failed.len();
        self.checks += report.results.iter().map(|r| r.stats.invariant_checks).sum::<u64>();
        for f in &report.failed {
            self.failed.push(format!("{name} {:?} seed {}: {}", f.cell.protocol, f.cell.seed, f.error));
        }
    }
}

fn checked(mut s: Scenario) -> Scenario {
    s.debug_invariants = true;
    s
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Seed-averaged metric keyed by (protocol, bandwidth level, speed).
fn averaged(
    results: &[CellResult],
    f: impl Fn(&CellResult) -> f64,
) -> BTreeMap<(Protocol, u64, u64), f64> {
    let mut acc: BTreeMap<(Protocol, u64, u64), Vec<f64>> = BTreeMap::new();
    for r in results {
        let key = (r.cell.protocol, r.cell.bw_level, (r.cell.speed[1] * 100.0).round() as u64);
        acc.entry(key).or_default().push(f(r));
    }
    acc.into_iter().map(|(k, v)| (k, mean(&v))).collect()
}

fn csv_bytes(s: &Scenario, report: &SweepReport) -> Vec<u8> {
    let mut buf = Vec::new();
    write_csv(&mut buf, &report.rows(s)).unwrap();
    buf
}

fn determinism(_: &mut Books) -> Verdict {
    let mut notes = Vec::new();
    let mut pass = true;
    for name in ["fig3a", "fig3b", "fig4", "fig5"] {
        let s = Scenario::preset(name).unwrap();
        let all = s.cells();
        let mut cells: Vec<Cell> = Vec::new();
        for p in &s.protocols {
            cells.extend(all.iter().find(|c| c.protocol == *p && c.seed == s.seeds[0]).cloned());
        }
        for cell in cells {
            let t0 = Instant::now();
            let a = run_cells(&s, std::slice::from_ref(&cell));
            let secs = t0.elapsed().as_secs_f64();
            let b = run_cells(&s, std::slice::from_ref(&cell));
            let same = a.failed.is_empty() && csv_bytes(&s, &a) == csv_bytes(&s, &b);
            pass &= same && secs < 60.0;
            notes.push(format!("{name}/{}: {}{:.0}s", cell.protocol, if same { "" } else { "DIFFERS " }, secs));
        }
    }
    verdict(pass, notes.join(", "))
}

fn routing_oracle(_: &mut Books) -> Verdict {
    let mut rng = RngStream::new(7, "topologies");
    let mut done = 0;
    let mut mismatches = Vec::new();
    let mut longest = 0;
    while done < 200 {
        let n = rng.draw_int(2, 15).unwrap() as usize;
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.draw_uniform(0.0, 900.0).unwrap(), rng.draw_uniform(0.0, 900.0).unwrap()))
            .collect();
        let src = rng.pick(n);
        let hops = bfs_hops(&points, src);
        let reachable: Vec<usize> = (0..n).filter(|&d| d != src && hops[d].is_some()).collect();
        if reachable.is_empty() {
            continue;
        }
        let dest = reachable[rng.pick(reachable.len())];
        let want = hops[dest].unwrap();
        longest = longest.max(want);
        for p in [Protocol::Aodv, Protocol::New] {
            let spec = datagram(src as u32, dest as u32, 500, 0.5, 2.0);
            let mut net = network(p, &points, &[spec]);
            net.run_until(t(3.0));
            let c = net.connection(ConnectionId(0));
            let got = c.route.len().saturating_sub(1) as u32;
            if got != want {
                mismatches.push(format!("topology {done} {p}: {got} vs {want}"));
            }
        }
        done += 1;
    }
    let detail = format!("200 topologies, longest shortest path {longest} hops, {} mismatches {:?}", mismatches.len(), mismatches.iter().take(3).collect::<Vec<_>>());
    verdict(mismatches.is_empty(), detail)
}

fn drop_oracle(_: &mut Books) -> Verdict {
    // every multiset of size <= 10 over 6 bandwidths x 2 priorities,
    // as counts per (priority, bandwidth) type
    let types: Vec<(Priority, u64)> = [Priority::Bulk, Priority::Realtime]
        .into_iter()
        .flat_map(|p| (1..=6).map(move |bw| (p, bw)))
        .collect();
    let mut counts = vec![0usize; types.len()];
    let mut multisets = 0u64;
    let mut checks = 0u64;
    let mut bad = Vec::new();
    let mut mismatches = 0u64;
    loop {
        let cands: Vec<DropCandidate> = counts
            .iter()
            .zip(&types)
            .flat_map(|(&k, &(p, bw))| std::iter::repeat((p, bw)).take(k))
            .enumerate()
            .map(|(i, (p, bw))| (ConnectionId(i as u32), p, bw))
            .collect();
        multisets += 1;
        for incoming in [Priority::Bulk, Priority::Realtime] {
            // exhaustive: visit every subset in Gray-code order and keep
            // the most any all-evictable subset frees
            let mut best = 0;
            let (mut sum, mut blocked, mut inside) = (0, 0, 0u32);
            for m in 1u32..1 << cands.len() {
                let i = m.trailing_zeros() as usize;
                let c = cands[i];
                let sign = if inside & (1 << i) == 0 { 1 } else { -1 };
                inside ^= 1 << i;
                sum += sign * c.2 as i64;
                if c.1 >= incoming {
                    blocked += sign;
                }
                if blocked == 0 {
                    best = best.max(sum as u64);
                }
            }
            for needed in 1..=best + 1 {
                checks += 1;
                let picked = select_drops(&cands, needed, incoming);
                let freed: u64 = picked.iter().map(|id| cands[id.0 as usize].2).sum();
                let valid = picked.iter().all(|id| cands[id.0 as usize].1 < incoming);
                let greedy = !picked.is_empty() && freed >= needed && valid;
                if greedy != (needed <= best) {
                    mismatches += 1;
                    if bad.len() < 3 {
                        bad.push(format!("{cands:?} needed {needed} incoming {incoming:?}"));
                    }
                }
            }
        }
        // next multiset in lexicographic order of counts with sum <= 10
        let mut i = 0;
        loop {
            if i == counts.len() {
                let detail = format!("{multisets} multisets, {checks} feasibility checks, {mismatches} mismatches {bad:?}");
                return verdict(bad.is_empty(), detail);
            }
            counts[i] += 1;
            if counts.iter().sum::<usize>() <= 10 {
                break;
            }
            counts[i] = 0;
            i += 1;
        }
    }
}

fn static_sanity(_: &mut Books) -> Verdict {
    let line = [(100.0, 500.0), (300.0, 500.0), (500.0, 500.0), (700.0, 500.0)];
    let mut notes = Vec::new();
    let mut pass = true;
    for p in Protocol::ALL {
        let net = network(p, &line, &[datagram(0, 3, 1000, 1.0, 10.0)]);
        let (ledger, _) = net.finish(t(15.0));
        let pdr = metrics::pdr(&ledger);
        let o = metrics::overhead_per_request(&ledger, OverheadCounting::Originations, false);
        let tx = metrics::overhead_per_request(&ledger, OverheadCounting::Transmissions, false);
        // hand count: 1 RREQ + 1 RREP created; 3 + 3 hops on the air
        pass &= pdr == 1.0 && o == 2.0 && tx == 6.0 && ledger.data_sent > 0;
        notes.push(format!("{p}: pdr {pdr} overhead {o} ({tx} on air)"));
    }
    verdict(pass, notes.join(", "))
}

/// 50 NEW runs on 100 nodes with random speeds and heavy demand; logs are
/// kept for the serial-order scan.
fn randomized_new_runs(books: &mut Books) -> Vec<CellResult> {
    let mut s = checked(Scenario::preset("fig5").unwrap());
    s.name = "randomized".into();
    s.duration = 30.0;
    s.record_log = true;
    s.reestablish = ReestablishMode::Serial;
    s.connections.realtime_fraction = 0.5;
    let cells: Vec<Cell> = (1..=50)
        .map(|seed| {
            let v = RngStream::new(seed, "acceptance").draw_uniform(0.0, 20.0).unwrap();
            Cell {
                protocol: Protocol::New,
                seed,
                node_count: 100,
                speed: [v, v],
                demand: [1000, 6000],
                bw_level: 6000,
            }
        })
        .collect();
    let report = run_cells(&s, &cells);
    books.absorb("randomized", &report);
    report.results
}

fn priority_protection(runs: &[CellResult]) -> Verdict {
    let mut counted = 0;
    let mut from_log = 0;
    let mut drops = 0;
    for r in runs {
        counted += r.stats.realtime_dropped_for_bulk;
        drops += r.stats.policy_drops;
        from_log += r
            .ledger
            .log
            .iter()
            .filter(|x| {
                matches!(x, LogRecord::PolicyDrop { victim_priority: Priority::Realtime, incoming_priority: Priority::Bulk, .. })
            })
            .count();
    }
    let detail = format!(
        "{} runs, {drops} policy drops, realtime-for-bulk: {counted} counted, {from_log} in logs",
        runs.len()
    );
    verdict(runs.len() == 50 && counted == 0 && from_log == 0, detail)
}

fn serial_order(runs: &[CellResult]) -> Verdict {
    let mut batches = 0;
    let mut mixed = 0;
    let mut violations = Vec::new();
    for r in runs {
        // per batch, in log order: (priority, conn, started?)
        let mut per_batch: BTreeMap<u64, Vec<(Priority, ConnectionId, bool)>> = BTreeMap::new();
        let mut prio: BTreeMap<ConnectionId, Priority> = BTreeMap::new();
        for rec in &r.ledger.log {
            match *rec {
                LogRecord::DiscoveryStarted { conn, priority, batch: Some(b), .. } => {
                    prio.insert(conn, priority);
                    per_batch.entry(b).or_default().push((priority, conn, true));
                }
                LogRecord::DiscoveryFinished { conn, batch: Some(b), .. } => {
                    if let Some(&p) = prio.get(&conn) {
                        per_batch.entry(b).or_default().push((p, conn, false));
                    }
                }
                _ => {}
            }
        }
        for (b, events) in per_batch {
            batches += 1;
            let kinds: BTreeSet<Priority> = events.iter().map(|e| e.0).collect();
            if kinds.len() == 2 {
                mixed += 1;
            }
            let realtime: BTreeSet<ConnectionId> =
                events.iter().filter(|e| e.0 == Priority::Realtime).map(|e| e.1).collect();
            let mut finished = BTreeSet::new();
            for &(p, conn, start) in &events {
                match (p, start) {
                    (Priority::Realtime, false) => {
                        finished.insert(conn);
                    }
                    (Priority::Bulk, true) if finished.len() < realtime.len() => {
                        violations.push(format!("seed {} batch {b} conn {}", r.cell.seed, conn.0));
                    }
                    _ => {}
                }
            }
        }
    }
    let detail = format!(
        "{batches} batches scanned, {mixed} with both classes, {} violations {:?}",
        violations.len(),
        violations.iter().take(3).collect::<Vec<_>>()
    );
    verdict(violations.is_empty() && mixed > 0, detail)
}

fn fig3b(books: &mut Books) -> Verdict {
    let mut s = checked(Scenario::preset("fig3b").unwrap());
    s.protocols = vec![Protocol::Aodv, Protocol::New];
    let report = run_cells(&s, &s.cells());
    books.absorb("fig3b", &report);
    let pdr = averaged(&report.results, |r| r.pdr());
    let speeds: BTreeSet<u64> = pdr.keys().map(|k| k.2).collect();
    let mut pass = report.failed.is_empty();
    let mut notes = Vec::new();
    let mut new_series = Vec::new();
    for &v in &speeds {
        let lvl = s.connections.demand_kbps[1];
        let (a, n) = (pdr[&(Protocol::Aodv, lvl, v)], pdr[&(Protocol::New, lvl, v)]);
        new_series.push(n);
        if v >= 500 {
            pass &= n >= a;
        }
        notes.push(format!("{}m/s new {n:.4} aodv {a:.4}", v / 100));
    }
    let spread = new_series.iter().cloned().fold(f64::MIN, f64::max)
        - new_series.iter().cloned().fold(f64::MAX, f64::min);
    pass &= spread <= 0.05;
    verdict(pass, format!("{}; new spread {:.2} pp", notes.join(", "), spread * 100.0))
}

/// The fig3b ordering under other packet sizes and run lengths.
fn stability(books: &mut Books) -> Verdict {
    let mut pass = true;
    let mut notes = Vec::new();
    for (packet_bits, duration) in [(4096, 100.0), (16384, 50.0), (16384, 300.0)] {
        let mut s = Scenario::preset("fig3b").unwrap();
        s.protocols = vec![Protocol::Aodv, Protocol::New];
        s.seeds = vec![1];
        s.sweep[0].values = vec![10.0, 20.0];
        s.traffic.packet_bits = packet_bits;
        s.duration = duration;
        let report = run_cells(&s, &s.cells());
        books.absorb("stability", &report);
        pass &= report.failed.is_empty();
        let pdr = averaged(&report.results, |r| r.pdr());
        let lvl = s.connections.demand_kbps[1];
        for v in [1000, 2000] {
            let (a, n) = (pdr[&(Protocol::Aodv, lvl, v)], pdr[&(Protocol::New, lvl, v)]);
            pass &= n >= a;
            notes.push(format!("{packet_bits}b {duration}s {}m/s new {n:.4} aodv {a:.4}", v / 100));
        }
    }
    verdict(pass, notes.join(", "))
}

fn fig4(books: &mut Books) -> Verdict {
    let s = checked(Scenario::preset("fig4").unwrap());
    let report = run_cells(&s, &s.cells());
    books.absorb("fig4", &report);
    let tp = averaged(&report.results, |r| r.throughput());
    let levels: BTreeSet<u64> = tp.keys().map(|k| k.1).collect();
    let speeds: Vec<u64> = tp.keys().map(|k| k.2).collect::<BTreeSet<_>>().into_iter().collect();
    let mut pass = report.failed.is_empty();
    let mut notes = Vec::new();
    for &lvl in &levels {
        let series: Vec<f64> = speeds.iter().map(|&v| tp[&(Protocol::New, lvl, v)]).collect();
        let rises = speeds
            .windows(2)
            .zip(series.windows(2))
            .filter(|(v, y)| v[1] > 400 && y[1] > y[0])
            .count();
        pass &= rises <= 1;
        let shown: Vec<String> = series.iter().map(|y| format!("{:.1}", y / 1e6)).collect();
        notes.push(format!("{lvl}: [{}] Mb/s, {rises} rises", shown.join(" ")));
    }
    let (lo, hi) = (levels.first().copied().unwrap(), levels.last().copied().unwrap());
    let below = speeds
        .iter()
        .filter(|&&v| tp[&(Protocol::New, hi, v)] <= tp[&(Protocol::New, lo, v)])
        .count();
    pass &= below <= 1;
    notes.push(format!("{hi} above {lo} except at {below} speeds"));
    verdict(pass, notes.join("; "))
}

fn fig5(books: &mut Books) -> Verdict {
    let s = checked(Scenario::preset("fig5").unwrap());
    let report = run_cells(&s, &s.cells());
    books.absorb("fig5", &report);
    let oh = averaged(&report.results, |r| r.overhead(&s, false));
    let levels: BTreeSet<u64> = oh.keys().map(|k| k.1).collect();
    let mut pass = report.failed.is_empty();
    let mut notes = Vec::new();
    let overall = |p: Protocol| mean(&oh.iter().filter(|(k, _)| k.0 == p).map(|(_, v)| *v).collect::<Vec<_>>());
    for &lvl in &levels {
        let at = |p: Protocol| {
            oh.iter()
                .find(|(k, _)| k.0 == p && k.1 == lvl)
                .map(|(_, v)| *v)
                .unwrap()
        };
        let (n, a, d) = (at(Protocol::New), at(Protocol::Aodv), at(Protocol::Dsr));
        pass &= n <= a && a < d;
        notes.push(format!("{lvl}: new {n:.2} aodv {a:.2} dsr {d:.2}"));
    }
    let (a, d) = (overall(Protocol::Aodv), overall(Protocol::Dsr));
    pass &= a < 10.0 && d > 3.0 * a;
    notes.push(format!("means aodv {a:.2} dsr {d:.2}"));
    verdict(pass, notes.join("; "))
}

fn conservation(books: &Books) -> Verdict {
    let detail = format!(
        "{} runs, {} checks after grant changes, failures {:?}",
        books.runs,
        books.checks,
        books.failed.iter().take(3).collect::<Vec<_>>()
    );
    verdict(books.runs > 0 && books.checks > 0 && books.failed.is_empty(), detail)
}

fn fig3a_books(books: &mut Books) {
    // the remaining preset: one seed, every protocol and speed
    let mut s = checked(Scenario::preset("fig3a").unwrap());
    s.seeds = vec![1];
    let report = run_cells(&s, &s.cells());
    books.absorb("fig3a", &report);
}

fn main() {
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let wanted = |name: &str| filter.as_deref().is_none_or(|f| name.contains(f));
    let mut books = Books::default();
    let mut lines = Vec::new();
    let mut record = |name: &str, t0: Instant, v: Verdict| {
        let line = format!(
            "{} {name} ({:.0}s): {}",
            if v.pass { "PASS" } else { "FAIL" },
            t0.elapsed().as_secs_f64(),
            v.detail
        );
        println!("{line}");
        std::io::stdout().flush().ok();
        lines.push((v.pass, line));
    };

    let simple: [(&str, fn(&mut Books) -> Verdict); 4] = [
        ("static-sanity", static_sanity),
        ("routing-oracle", routing_oracle),
        ("drop-policy-oracle", drop_oracle),
        ("determinism", determinism),
    ];
    for (name, f) in simple {
        if wanted(name) {
            let t0 = Instant::now();
            let v = f(&mut books);
            record(name, t0, v);
        }
    }
    if wanted("priority-protection") || wanted("serial-order") {
        let t0 = Instant::now();
        let runs = randomized_new_runs(&mut books);
        if wanted("priority-protection") {
            record("priority-protection", t0, priority_protection(&runs));
        }
        if wanted("serial-order") {
            record("serial-order", t0, serial_order(&runs));
        }
    }
    let trends: [(&str, fn(&mut Books) -> Verdict); 4] = [
        ("trend-fig3b", fig3b),
        ("trend-stability", stability),
        ("trend-fig4", fig4),
        ("magnitude-fig5", fig5),
    ];
    for (name, f) in trends {
        if wanted(name) {
            let t0 = Instant::now();
            let v = f(&mut books);
            record(name, t0, v);
        }
    }
    if wanted("capacity-conservation") {
        let t0 = Instant::now();
        fig3a_books(&mut books);
        record("capacity-conservation", t0, conservation(&books));
    }

    let failed = lines.iter().filter(|(ok, _)| !ok).count();
    println!("{} criteria, {} failed", lines.len(), failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
