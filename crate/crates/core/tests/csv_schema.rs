use manet::routing::Protocol;
use manet::runner::{read_csv, run_scenario, write_csv, Row, CSV_COLUMNS};
use manet::scenario::Scenario;

// (figure, x column, y column, series column) as the plotting side reads them
const FIGURES: [(&str, &str, &str, &str); 4] = [
    ("fig3a", "speed", "pdr", "protocol"),
    ("fig3b", "speed", "pdr", "protocol"),
    ("fig4", "speed", "throughput_bps", "bw_demand"),
    ("fig5", "bw_demand", "overhead_per_req", "protocol"),
];

#[test]
fn columns_are_fixed_and_ordered() {
    assert_eq!(
        CSV_COLUMNS.join(","),
        "scenario,preset,protocol,seed,node_count,speed,bw_demand,pdr,throughput_bps,\
         overhead_per_req,overhead_incl_hello,drops_policy,drops_unreachable,artifact_version"
    );
}

#[test]
fn every_figure_finds_its_columns() {
    for (fig, x, y, series) in FIGURES {
        for col in [x, y, series] {
            assert!(CSV_COLUMNS.contains(&col), "{fig} needs {col}");
        }
        Scenario::preset(fig).unwrap();
    }
}

#[test]
fn rows_round_trip_through_csv() {
    let mut s = Scenario::preset("fig5").unwrap();
    s.node_count = 15;
    s.duration = 5.0;
    s.connections.sources = [3, 4];
    let r = run_scenario(&s, Protocol::New, 4).unwrap();
    let row = r.row(&s, &s.hash());
    let mut buf = Vec::new();
    write_csv(&mut buf, std::slice::from_ref(&row)).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(fields.len(), CSV_COLUMNS.len());
    assert_eq!(fields[2], "new");
    assert_eq!(fields[5], "2.00");
    let back: Vec<Row> = read_csv(&buf[..]).unwrap();
    assert_eq!(back, vec![row]);
}

#[test]
fn scenario_hash_tracks_content() {
    let a = Scenario::preset("fig4").unwrap();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.duration += 1.0;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 16);
}
