use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use marlin_core::log_store::LogStore;
use marlin_core::sim::scenario::{bundled, ScenarioSpec};
use marlin_core::sim::soak::{run_soak, SoakConfig};
use marlin_core::sim::{Sim, SimConfig, Trace};
use marlin_core::verifier::explore::{self, ExploreConfig, ExploreOutcome, Workload};
use marlin_core::verifier::{self, GroundTruth};

const PASS: u8 = 0;
const VIOLATION: u8 = 2;
const INCONCLUSIVE: u8 = 3;
const USAGE: u8 = 4;

#[derive(Parser)]
#[command(name = "marlin", version, about = "Simulate, explore and verify Marlin clusters")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario (or an append soak) and audit it.
    Run {
        /// Bundled scenario name or path to a scenario JSON file.
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Instead of a scenario, hammer the logs from this many threads.
        #[arg(long)]
        soak_threads: Option<u32>,
        /// Successful appends per thread per log in a soak.
        #[arg(long, default_value_t = 10_000)]
        appends: u64,
    },
    /// Exhaustively explore interleavings of a small cluster.
    Explore {
        #[arg(long, default_value_t = 2)]
        nodes: u32,
        #[arg(long, default_value_t = 2)]
        granules: u32,
        #[arg(long, default_value_t = 2)]
        txns: u32,
        #[arg(long, default_value_t = 400)]
        depth: usize,
        #[arg(long, default_value_t = 0)]
        crashes: u32,
        #[arg(long, value_enum, default_value_t = WorkloadArg::Migrations)]
        workload: WorkloadArg,
        /// Seed a known bug to check that the explorer catches it.
        #[arg(long, value_enum)]
        bug: Option<Bug>,
        /// Interleave independent conflict classes too.
        #[arg(long)]
        no_reduce: bool,
        #[arg(long, default_value_t = 20_000_000)]
        max_states: usize,
        /// Give up after this many seconds.
        #[arg(long)]
        time_limit: Option<u64>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Re-execute the schedule of a saved report and print its trace.
        #[arg(long)]
        replay: Option<PathBuf>,
    },
    /// Audit a recorded trace offline.
    Verify {
        #[arg(long)]
        trace: PathBuf,
    },
    /// Check the file-backed logs under MARLIN_LOG_DIR (or --dir).
    Fsck {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum WorkloadArg {
    Migrations,
    StaleWrite,
}

#[derive(Clone, Copy, ValueEnum)]
enum Bug {
    /// Skip the ownership guard and granule locks.
    SkipGuard,
    /// Accept every append regardless of its target LSN.
    NoCas,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { USAGE } else { PASS };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.cmd {
        Cmd::Run {
            scenario,
            seed,
            out,
            soak_threads,
            appends,
        } => match soak_threads {
            Some(t) => cmd_soak(t, appends, &out),
            None => match scenario {
                Some(s) => cmd_run(&s, seed, &out),
                None => Err(Usage("run needs --scenario or --soak-threads".into()).into()),
            },
        },
        Cmd::Explore {
            nodes,
            granules,
            txns,
            depth,
            crashes,
            workload,
            bug,
            no_reduce,
            max_states,
            time_limit,
            out,
            replay,
        } => {
            let mut cfg = ExploreConfig::new(nodes, granules, txns);
            cfg.depth = depth;
            cfg.crashes = crashes;
            cfg.max_states = max_states;
            cfg.reduce = !no_reduce;
            cfg.time_limit = time_limit.map(Duration::from_secs);
            cfg.workload = match workload {
                WorkloadArg::Migrations => Workload::Migrations,
                WorkloadArg::StaleWrite => Workload::StaleWrite,
            };
            match bug {
                Some(Bug::SkipGuard) => cfg.skip_guard = true,
                Some(Bug::NoCas) => cfg.no_cas = true,
                None => {}
            }
            match replay {
                Some(p) => cmd_replay(&p),
                None => cmd_explore(&cfg, out.as_deref()),
            }
        }
        Cmd::Verify { trace } => cmd_verify(&trace),
        Cmd::Fsck { dir } => cmd_fsck(dir),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("marlin: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(USAGE)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_scenario(name: &str) -> Result<ScenarioSpec> {
    let text = match bundled::get(name) {
        Some(t) => t.to_string(),
        None => fs::read_to_string(name).map_err(|e| Usage(format!("scenario {name}: {e}")))?,
    };
    ScenarioSpec::from_json(&text).map_err(|e| Usage(e.to_string()).into())
}

fn cmd_run(scenario: &str, seed: u64, out: &Path) -> Result<u8> {
    let spec = load_scenario(scenario)?;
    let cfg = SimConfig::for_scenario(&spec, seed);
    let store = LogStore::from_env().context("opening MARLIN_LOG_DIR")?;
    let sim = Sim::with_store(cfg, spec, store)?;
    let res = sim.run();
    fs::create_dir_all(out)?;
    fs::write(out.join("trace.jsonl"), res.trace.to_jsonl())?;
    fs::write(out.join("metrics.csv"), res.metrics.to_csv())?;
    fs::write(out.join("verdict.json"), serde_json::to_string_pretty(&res.verdict)?)?;
    let v = &res.verdict;
    println!(
        "{}: seed {seed}, {} ticks, {} committed, {} aborted, {} cuts audited, {} violations{}",
        scenario,
        res.end_tick,
        v.committed,
        v.aborted,
        v.cuts,
        v.violations.len(),
        if v.quiescent { "" } else { ", not quiescent" }
    );
    for x in v.violations.iter().take(10) {
        println!("  {x}");
    }
    Ok(verdict_code(v.pass, v.quiescent))
}

fn verdict_code(pass: bool, quiescent: bool) -> u8 {
    if !pass {
        VIOLATION
    } else if !quiescent {
        INCONCLUSIVE
    } else {
        PASS
    }
}

fn cmd_soak(threads: u32, appends: u64, out: &Path) -> Result<u8> {
    let cfg = SoakConfig {
        threads,
        appends,
        ..SoakConfig::default()
    };
    let store = Arc::new(LogStore::from_env().context("opening MARLIN_LOG_DIR")?);
    let rep = run_soak(store, &cfg)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("verdict.json"), serde_json::to_string_pretty(&rep)?)?;
    for l in &rep.logs {
        println!(
            "{}: tail {}, {} successes, {} lost races, {} gaps, {} double claims",
            l.log, l.tail, l.successes, l.failures, l.gaps, l.double_claims
        );
    }
    Ok(if rep.pass() { PASS } else { VIOLATION })
}

fn cmd_explore(cfg: &ExploreConfig, out: Option<&Path>) -> Result<u8> {
    if cfg.nodes == 0 || cfg.granules == 0 {
        bail!(Usage("need at least one node and one granule".into()));
    }
    let rep = explore::explore(cfg);
    let doc = serde_json::json!({ "config": cfg, "report": rep });
    let text = serde_json::to_string_pretty(&doc)?;
    if let Some(p) = out {
        fs::write(p, &text)?;
    }
    println!("{text}");
    Ok(match rep.outcome {
        ExploreOutcome::Clean => PASS,
        ExploreOutcome::Violation => VIOLATION,
        ExploreOutcome::Inconclusive => INCONCLUSIVE,
    })
}

fn cmd_replay(path: &Path) -> Result<u8> {
    let doc: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let cfg: ExploreConfig = serde_json::from_value(doc["config"].clone()).context("report has no config")?;
    let schedule: Vec<String> = serde_json::from_value(doc["report"]["schedule"].clone()).unwrap_or_default();
    if schedule.is_empty() {
        bail!(Usage("report holds no schedule to replay".into()));
    }
    let (trace, violations) = explore::replay(&cfg, &schedule).map_err(anyhow::Error::msg)?;
    for r in &trace.records {
        println!("{}", serde_json::to_string(r)?);
    }
    for v in &violations {
        eprintln!("{v}");
    }
    Ok(if violations.is_empty() { PASS } else { VIOLATION })
}

fn cmd_verify(path: &Path) -> Result<u8> {
    let text = fs::read_to_string(path).map_err(|e| Usage(format!("{}: {e}", path.display())))?;
    let trace = Trace::from_jsonl(&text).context("parsing trace")?;
    let Some(layout) = trace.layout().cloned() else {
        bail!(Usage("trace has no start record with a granule layout".into()));
    };
    let v = verifier::verify_trace(&trace, &layout);
    println!("{}", serde_json::to_string_pretty(&v)?);
    Ok(verdict_code(v.pass, v.quiescent))
}

fn cmd_fsck(dir: Option<PathBuf>) -> Result<u8> {
    let dir = match dir.or_else(|| std::env::var_os("MARLIN_LOG_DIR").map(PathBuf::from)) {
        Some(d) => d,
        None => bail!(Usage("set MARLIN_LOG_DIR or pass --dir".into())),
    };
    let store = match LogStore::open_dir(&dir) {
        Ok(s) => s,
        Err(e) => {
            println!("{}: {e}", dir.display());
            return Ok(VIOLATION);
        }
    };
    let gt = GroundTruth::from_snapshot(&store.snapshot());
    let logs = store.logs();
    for l in &logs {
        println!("{l}: {} batches, contiguous", store.tail(*l)?.0);
    }
    // A soak directory has no node partitions; only frame integrity applies.
    let has_partitions = gt.node_views(false).values().any(|v| !v.granules.is_empty());
    if !has_partitions {
        println!("{} logs, frames intact", logs.len());
        return Ok(PASS);
    }
    let granules: std::collections::BTreeSet<_> = gt.node_views(false).values().flat_map(|v| v.granules.keys().copied()).collect();
    let layout = marlin_core::GranuleLayout::new(
        granules
            .iter()
            .enumerate()
            .map(|(i, g)| (*g, marlin_core::KeyRange::new(i as u64, i as u64 + 1)))
            .collect(),
    )?;
    let vs = verifier::check_invariants(&gt, &layout);
    for v in &vs {
        println!("  {v}");
    }
    println!("{} logs, {} granules, {} violations", logs.len(), granules.len(), vs.len());
    Ok(if vs.is_empty() { PASS } else { VIOLATION })
}
