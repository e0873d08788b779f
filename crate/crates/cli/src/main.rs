use std::fs;
use std::io;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use manet::routing::Protocol;
use manet::runner::{run_cells, write_csv};
use manet::scenario::Scenario;

#[derive(Parser)]
#[command(name = "manet-sim", version, about = "MANET routing simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario sweep and write one CSV row per cell.
    Run(RunArgs),
    /// Print a built-in preset as an editable scenario file.
    Preset { name: String },
}

#[derive(clap::Args)]
struct RunArgs {
    /// Scenario file (TOML).
    #[arg(long, required_unless_present = "preset")]
    scenario: Option<PathBuf>,
    /// Built-in scenario; ignored when --scenario is given.
    #[arg(long, value_parser = ["fig3a", "fig3b", "fig4", "fig5"])]
    preset: Option<String>,
    /// Run only this seed instead of the scenario's seed list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run only this protocol.
    #[arg(long)]
    protocol: Option<Protocol>,
    /// Count hello beacons in the overhead_per_req column.
    #[arg(long)]
    include_hello_overhead: bool,
    /// Override the simulated duration, seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Print per-cell run statistics to stderr.
    #[arg(long, short)]
    verbose: bool,
}

fn load(args: &RunArgs) -> Result<Scenario> {
    let mut s = match (&args.scenario, &args.preset) {
        (Some(path), _) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Scenario::from_toml(&text).with_context(|| format!("in {}", path.display()))?
        }
        (None, Some(name)) => Scenario::preset(name)?,
        (None, None) => bail!("either --scenario or --preset is required"),
    };
    if let Some(seed) = args.seed {
        s.seeds = vec![seed];
    }
    if let Some(p) = args.protocol {
        s.protocols = vec![p];
    }
    if let Some(d) = args.duration {
        s.duration = d;
    }
    if args.include_hello_overhead {
        s.routing.include_hello_overhead = true;
    }
    s.validate()?;
    Ok(s)
}

fn run(args: RunArgs) -> Result<bool> {
    let s = load(&args)?;
    let cells = s.cells();
    eprintln!("{}: {} cells", s.name, cells.len());
    let started = Instant::now();
    let report = run_cells(&s, &cells);
    eprintln!("done in {:.1}s", started.elapsed().as_secs_f64());
    if args.verbose {
        for r in &report.results {
            eprintln!(
                "{} seed={} speed={} bw={}: {:?} sent={} recv={} requests={} losses={:?} control={:?}",
                r.cell.protocol,
                r.cell.seed,
                r.cell.speed[1],
                r.cell.bw_level,
                r.stats,
                r.ledger.data_sent,
                r.ledger.data_received,
                r.ledger.connection_requests,
                r.ledger.losses,
                r.ledger.control
            );
        }
    }
    let rows = report.rows(&s);
    match &args.out {
        Some(path) => {
            let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
            write_csv(f, &rows)?;
        }
        None => write_csv(io::stdout().lock(), &rows)?,
    }
    for f in &report.failed {
        eprintln!(
            "FAILED cell protocol={} seed={} nodes={} speed={} bw={}: {}",
            f.cell.protocol, f.cell.seed, f.cell.node_count, f.cell.speed[1], f.cell.bw_level, f.error
        );
    }
    Ok(report.failed.is_empty())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => run(args),
        Command::Preset { name } => Scenario::preset(&name)
            .map(|s| {
                print!("{}", s.to_toml());
                true
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
