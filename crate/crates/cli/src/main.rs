use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use sakshi_core::harness::{self, diff_traces, Scenario, Topology, Trace, TraceDiff};

#[derive(Parser)]
#[command(name = "sakshi", version, about = "Deterministic simulator for verifiable, metered inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and print its report.
    Run {
        /// Path to a scenario TOML file, or the name of a bundled scenario.
        #[arg(long)]
        scenario: String,
        /// Override the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Write trace.jsonl, report.json and ledger.jsonl here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Compare two traces; exits 1 at the first differing line.
    VerifyTrace {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Play one bisection game per fault position and report round counts.
    BenchBisection {
        #[arg(long, default_value_t = 64)]
        nodes: usize,
        #[arg(long, default_value = "chain")]
        topology: Topology,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a trace, optionally filtered.
    ViewTrace {
        trace: PathBuf,
        #[arg(long)]
        actor: Option<String>,
        /// Event name or prefix (e.g. `ledger/`).
        #[arg(long)]
        event: Option<String>,
    },
    /// List the bundled scenarios.
    List,
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            scenario,
            seed,
            out,
            json,
        } => run(&scenario, seed, out.as_deref(), json),
        Command::VerifyTrace { a, b } => verify(&a, &b),
        Command::BenchBisection { nodes, topology, seed } => bench(nodes, topology, seed),
        Command::ViewTrace { trace, actor, event } => view(&trace, actor.as_deref(), event.as_deref()),
        Command::List => {
            for name in harness::bundled_names() {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn load_scenario(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("loading {}", path.display()));
    }
    match harness::bundled(arg) {
        Some(s) => Ok(s?),
        None => bail!(
            "{arg:?} is neither a file nor a bundled scenario (try: {})",
            harness::bundled_names().collect::<Vec<_>>().join(", ")
        ),
    }
}

fn run(arg: &str, seed: Option<u64>, out: Option<&Path>, json: bool) -> Result<ExitCode> {
    let mut scenario = load_scenario(arg)?;
    if let Some(seed) = seed {
        scenario = scenario.with_seed(seed);
    }
    let output = harness::run(&scenario)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        output.trace.write(&dir.join("trace.jsonl"))?;
        fs::write(dir.join("report.json"), output.report.to_json() + "\n")?;
        fs::write(dir.join("ledger.jsonl"), output.ledger.events_jsonl())?;
    }
    if json {
        println!("{}", output.report.to_json());
    } else {
        println!("{}", output.report);
    }
    Ok(ExitCode::SUCCESS)
}

fn verify(a: &Path, b: &Path) -> Result<ExitCode> {
    let ta = fs::read_to_string(a).with_context(|| format!("reading {}", a.display()))?;
    let tb = fs::read_to_string(b).with_context(|| format!("reading {}", b.display()))?;
    let diff = diff_traces(&ta, &tb);
    println!("{diff}");
    Ok(match diff {
        TraceDiff::Equal => ExitCode::SUCCESS,
        TraceDiff::Diverge { .. } => ExitCode::from(1),
    })
}

fn bench(nodes: usize, topology: Topology, seed: u64) -> Result<ExitCode> {
    if nodes == 0 && topology != Topology::Inception {
        bail!("--nodes must be positive");
    }
    let model = harness::sweep_model(topology, nodes, seed);
    let started = std::time::Instant::now();
    let stats = harness::sweep(&model, model.node_ids(), seed)?;
    let elapsed = started.elapsed();
    let mut v = serde_json::to_value(&stats)?;
    v["topology"] = topology.to_string().into();
    v["elapsed_ms"] = (elapsed.as_secs_f64() * 1e3).into();
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(if stats.wrong_verdicts == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn view(path: &Path, actor: Option<&str>, event: Option<&str>) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = Trace::parse_jsonl(&text).with_context(|| format!("parsing {}", path.display()))?;
    for r in trace.records() {
        if actor.is_some_and(|a| r.actor != a) || event.is_some_and(|e| !r.event.starts_with(e)) {
            continue;
        }
        println!("{:>6} t{:<4} {:<14} {:<28} {}", r.seq, r.tick, r.actor, r.event, r.data);
    }
    Ok(ExitCode::SUCCESS)
}
