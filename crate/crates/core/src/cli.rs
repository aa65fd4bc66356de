//! Command-line orchestration: `run`, `compare` and `validate`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::{BuiltProblem, RunConfig};
use crate::cuts::CUT_DUMP_HEADER;
use crate::engine::{ActivityStats, Simulation};
use crate::error::{ArgusError, Result};
use crate::metrics::{MetricsRecord, TraceWriter};
use crate::scheduler::Mode;

#[derive(Debug, Parser)]
#[command(name = "argus", version, about = "Asynchronous decentralized bilevel optimization simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write metrics.csv and summary.json.
    Run(RunArgs),
    /// Run argus and argus-s on the same instance under the delay model.
    Compare(RunArgs),
    /// Run the built-in invariant suites.
    Validate,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// argus or argus-s; overrides the configured mode.
    #[arg(long)]
    pub mode: Option<Mode>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CounterSummary {
    pub comm_bits_cum: f64,
    pub flops_cum: f64,
    pub cut_bits_cum: f64,
    pub cut_flops_cum: f64,
    pub cut_epochs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub problem: String,
    pub mode: Mode,
    pub seed: u64,
    /// "ok" or "diverged".
    pub status: String,
    pub error: Option<String>,
    pub iterations: usize,
    pub stopped_early: bool,
    #[serde(rename = "final")]
    pub last: Option<MetricsRecord>,
    pub counters: CounterSummary,
    pub activity: ActivityStats,
    /// Separation AUC of the learned sample weights (hyperclean only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub separation_auc: Option<f64>,
}

/// Trace and summary of one run. `error` is set when the run stopped on a
/// numeric failure; the trace holds every completed iteration.
pub struct RunOutput {
    pub trace: Vec<MetricsRecord>,
    pub summary: RunSummary,
    pub error: Option<ArgusError>,
}

/// Runs `cfg` on `built`, streaming rows into `csv` and the optional dumps.
pub fn execute<W: Write>(cfg: &RunConfig, built: &BuiltProblem, csv: W) -> Result<RunOutput> {
    let mut writer = TraceWriter::new(csv)?;
    let mut topo_dump = open_dump(cfg.topology_dump.as_deref(), "t,i,j")?;
    let mut cut_dump = open_dump(cfg.cuts_dump.as_deref(), CUT_DUMP_HEADER)?;
    let mut sim = Simulation::new(built.as_dyn(), cfg.engine_config())?;
    if let Some(out) = topo_dump.as_mut() {
        sim.topology().write_edges(out)?;
    }
    let hp = &cfg.hyper;
    let mut error = None;
    while !sim.finished() {
        match sim.step() {
            Ok(rec) => writer.write(rec)?,
            Err(e @ (ArgusError::Divergence { .. } | ArgusError::Numeric { .. })) => {
                log::error!("run stopped: {e}");
                error = Some(e);
                break;
            }
            Err(e) => return Err(e),
        }
        let t = sim.iteration();
        if let Some(out) = topo_dump.as_mut() {
            if !cfg.static_topology {
                sim.topology().write_edges(out)?;
            }
        }
        if let Some(out) = cut_dump.as_mut() {
            if t % hp.iota == 0 && t <= hp.t1 {
                for a in sim.agents() {
                    a.polytope.write_rows(t, out)?;
                }
            }
        }
    }
    writer.flush()?;
    for out in [topo_dump.as_mut(), cut_dump.as_mut()].into_iter().flatten() {
        out.flush()?;
    }
    let separation_auc = match built {
        BuiltProblem::Hyperclean(p) => {
            let xs: Vec<Vec<f64>> = sim.agents().iter().map(|a| a.x.clone()).collect();
            Some(p.separation_auc(&xs))
        }
        _ => None,
    };
    let c = sim.counters();
    let summary = RunSummary {
        problem: sim.problem().name().to_string(),
        mode: cfg.mode,
        seed: cfg.seed,
        status: if error.is_some() { "diverged" } else { "ok" }.into(),
        error: error.as_ref().map(|e| e.to_string()),
        iterations: sim.iteration(),
        stopped_early: sim.finished() && sim.iteration() < hp.t,
        last: sim.trace().last().cloned(),
        counters: CounterSummary {
            comm_bits_cum: c.comm_bits_cum,
            flops_cum: c.flops_cum,
            cut_bits_cum: c.cut_bits_cum,
            cut_flops_cum: c.cut_flops_cum,
            cut_epochs: c.cut_epochs,
        },
        activity: sim.activity().clone(),
        separation_auc,
    };
    Ok(RunOutput { trace: sim.trace().to_vec(), summary, error })
}

fn open_dump(path: Option<&Path>, header: &str) -> Result<Option<BufWriter<File>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            writeln!(w, "{header}")?;
            Ok(Some(w))
        }
    }
}

/// First virtual time at which the upper loss is at or below `target`.
pub fn time_to_target(trace: &[MetricsRecord], target: f64) -> Option<f64> {
    trace.iter().find(|r| r.upper_loss <= target).map(|r| r.virtual_time)
}

/// Default target: 90% of the decrease achieved by the synchronous run.
pub fn default_target(sync_trace: &[MetricsRecord]) -> Option<f64> {
    let first = sync_trace.first()?.upper_loss;
    let best = sync_trace.iter().map(|r| r.upper_loss).fold(f64::INFINITY, f64::min);
    Some(first + 0.9 * (best - first))
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeOutcome {
    /// "reached" or "not reached".
    pub status: String,
    pub time_to_target: Option<f64>,
    pub iterations: usize,
    pub final_upper_loss: Option<f64>,
    pub total_virtual_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareSummary {
    pub problem: String,
    pub seed: u64,
    pub target_upper_loss: Option<f64>,
    /// "config" or "default".
    pub target_source: String,
    pub argus: ModeOutcome,
    #[serde(rename = "argus-s")]
    pub argus_s: ModeOutcome,
    /// Argus time-to-target over Argus-S time-to-target.
    pub time_ratio: Option<f64>,
}

pub fn summarize_compare(cfg: &RunConfig, problem: &str, argus: &[MetricsRecord], sync: &[MetricsRecord]) -> CompareSummary {
    let (target, source) = match cfg.target_upper_loss {
        Some(t) => (Some(t), "config"),
        None => (default_target(sync), "default"),
    };
    let outcome = |trace: &[MetricsRecord]| {
        let hit = target.and_then(|t| time_to_target(trace, t));
        ModeOutcome {
            status: if hit.is_some() { "reached" } else { "not reached" }.into(),
            time_to_target: hit,
            iterations: trace.len(),
            final_upper_loss: trace.last().map(|r| r.upper_loss),
            total_virtual_time: trace.last().map(|r| r.virtual_time),
        }
    };
    let a = outcome(argus);
    let s = outcome(sync);
    let time_ratio = match (a.time_to_target, s.time_to_target) {
        (Some(x), Some(y)) if y > 0.0 => Some(x / y),
        _ => None,
    };
    CompareSummary {
        problem: problem.to_string(),
        seed: cfg.seed,
        target_upper_loss: target,
        target_source: source.into(),
        argus: a,
        argus_s: s,
        time_ratio,
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn load(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_path(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = args.mode {
        cfg.mode = mode;
    }
    std::fs::create_dir_all(&args.out)?;
    Ok(cfg)
}

pub fn cmd_run(args: &RunArgs) -> Result<()> {
    let cfg = load(args)?;
    let built = cfg.build_problem()?;
    let csv = BufWriter::new(File::create(args.out.join("metrics.csv"))?);
    let out = execute(&cfg, &built, csv)?;
    write_json(&args.out.join("summary.json"), &out.summary)?;
    match out.error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn cmd_compare(args: &RunArgs) -> Result<()> {
    let cfg = load(args)?;
    if cfg.delay.is_none() {
        return Err(ArgusError::Config(vec!["compare needs a delay section".into()]));
    }
    let built = cfg.build_problem()?;
    let mut traces = Vec::new();
    for mode in [Mode::Argus, Mode::ArgusS] {
        let mut c = cfg.clone();
        c.mode = mode;
        let path = args.out.join(format!("metrics_{}.csv", mode.label()));
        let out = execute(&c, &built, BufWriter::new(File::create(path)?))?;
        if let Some(e) = out.error {
            return Err(e);
        }
        traces.push(out.trace);
    }
    let summary = summarize_compare(&cfg, built.as_dyn().name(), &traces[0], &traces[1]);
    write_json(&args.out.join("compare_summary.json"), &summary)
}

pub fn cmd_validate() -> Result<()> {
    let outcomes = crate::validate::run_all();
    print!("{}", crate::validate::format_table(&outcomes));
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed).map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(ArgusError::Consistency(format!("failed invariants: {}", failed.join(", "))))
    }
}

/// Parses arguments, dispatches, and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Validate => cmd_validate(),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                ArgusError::Config(msgs) => {
                    eprintln!("invalid configuration:");
                    for m in msgs {
                        eprintln!("  - {m}");
                    }
                }
                other => eprintln!("error: {other}"),
            }
            e.exit_code()
        }
    }
}
