//! Command-line entry points: `inspect`, `run`, `worker` and `simulate`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::heuristics::{model_complexity, ComplexityScore};
use crate::net::{read_trials, Master, MasterConfig, RunSummary, WorkerConfig};
use crate::scheduler::{ClassDef, Mode, Scheduler, SchedulerConfig};
use crate::sim::{compare_policies, load_scenario, Comparison};
use crate::space::load_spec;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input or configuration; exit status 2.
    #[error("{0}")]
    Usage(String),
    /// Failure while running; exit status 1.
    #[error("{0}")]
    Fatal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Fatal(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "hwhpo", version, about = "Hardware-aware distributed hyperparameter search")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Split a spec file and report each model's search complexity.
    Inspect(InspectArgs),
    /// Serve a search as master until the budget is spent.
    Run(RunArgs),
    /// Connect to a master and evaluate tasks.
    Worker(WorkerArgs),
    /// Compare scheduling policies on a simulated cluster.
    Simulate(SimulateArgs),
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub spec: PathBuf,
    /// Print JSON instead of a table.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the config's listen endpoint.
    #[arg(long)]
    pub listen: Option<String>,
}

#[derive(Debug, Args)]
pub struct WorkerArgs {
    /// Master endpoint, host:port.
    #[arg(long)]
    pub master: String,
    /// Hardware feature as key=value; repeatable.
    #[arg(long = "feature", value_parser = parse_feature)]
    pub features: Vec<(String, String)>,
    /// Shell command evaluating one task in its scratch directory.
    #[arg(long)]
    pub objective: String,
    #[arg(long)]
    pub worker_id: Option<String>,
    #[arg(long, default_value_t = 15.0)]
    pub heartbeat_s: f64,
    /// Give up after this many consecutive failed connection attempts.
    #[arg(long)]
    pub max_reconnects: Option<u32>,
    #[arg(long)]
    pub scratch_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    pub scenario: PathBuf,
    /// Policy to run; repeatable. Defaults to heuristic and fcfs.
    #[arg(long = "policy")]
    pub policies: Vec<Mode>,
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    /// First seed; defaults to the scenario's.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Where to write the comparison as JSON.
    #[arg(long, default_value = "simulation_report.json")]
    pub out: PathBuf,
}

fn parse_feature(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected key=value, got {s:?}")),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Budget {
    MaxTrials(usize),
    MaxSeconds(f64),
}

fn default_listen() -> String {
    "127.0.0.1:7878".into()
}
fn default_timeout() -> f64 {
    3600.0
}
fn default_retries() -> u32 {
    3
}
fn default_epsilon() -> f64 {
    0.1
}

/// Configuration of a live search. A relative `spec_path` is resolved
/// against the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec_path: PathBuf,
    pub mode: Mode,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    pub budget: Budget,
    #[serde(default = "default_listen")]
    pub listen: String,
    #[serde(default)]
    pub classes: Vec<ClassDef>,
    /// Heuristic tunables; `mode` and `epsilon` come from the fields above.
    #[serde(default)]
    pub scheduler: SchedulerConfig,
    #[serde(default = "default_timeout")]
    pub task_timeout_s: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if cfg.spec_path.is_relative() {
            cfg.spec_path = path.parent().unwrap_or(Path::new(".")).join(&cfg.spec_path);
        }
        Ok(cfg)
    }

    pub fn scheduler_config(&self) -> SchedulerConfig {
        SchedulerConfig { mode: self.mode, epsilon: self.epsilon, ..self.scheduler.clone() }
    }

    pub fn master_config(&self) -> MasterConfig {
        let (max_trials, max_seconds) = match self.budget {
            Budget::MaxTrials(n) => (Some(n), None),
            Budget::MaxSeconds(s) => (None, Some(s)),
        };
        MasterConfig {
            listen: self.listen.clone(),
            max_trials,
            max_seconds,
            task_timeout_s: self.task_timeout_s,
            max_retries: self.max_retries,
            output_dir: self.output_dir.clone(),
            seed: self.seed,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Inspect(a) => {
            print!("{}", cmd_inspect(&a.spec, a.json)?);
            Ok(())
        }
        Command::Run(a) => {
            let mut cfg = RunConfig::load(&a.config)?;
            if let Some(dir) = a.output_dir {
                cfg.output_dir = dir;
            }
            if let Some(listen) = a.listen {
                cfg.listen = listen;
            }
            let summary = cmd_run(&cfg)?;
            println!(
                "{} trials in {:.1} s ({:.1} tasks/hour); best loss {}",
                summary.trials,
                summary.elapsed_s,
                summary.throughput_per_hour,
                summary.best.as_ref().map_or("none".to_string(), |b| format!("{} ({})", b.loss, b.model_id))
            );
            Ok(())
        }
        Command::Worker(a) => cmd_worker(a),
        Command::Simulate(a) => {
            let comparison = cmd_simulate(&a)?;
            print!("{}", format_comparison(&comparison));
            Ok(())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectRow {
    pub model_id: String,
    pub domains: usize,
    pub complexity: ComplexityScore,
}

/// Models of a spec, most complex first (ties by id).
pub fn inspect_rows(spec: &Path) -> Result<Vec<InspectRow>, CliError> {
    let tree = load_spec(spec).map_err(|e| CliError::Usage(format!("{}: {e}", spec.display())))?;
    let mut rows: Vec<InspectRow> = tree
        .split()
        .iter()
        .map(|m| InspectRow { model_id: m.model_id.clone(), domains: m.domains.len(), complexity: model_complexity(m) })
        .collect();
    rows.sort_by(|a, b| b.complexity.total.total_cmp(&a.complexity.total).then_with(|| a.model_id.cmp(&b.model_id)));
    Ok(rows)
}

pub fn cmd_inspect(spec: &Path, json: bool) -> Result<String, CliError> {
    let rows = inspect_rows(spec)?;
    if json {
        let v = serde_json::to_value(&rows).expect("serializable rows");
        return Ok(format!("{}\n", serde_json::to_string_pretty(&v).expect("valid json")));
    }
    let mut out = String::new();
    for r in &rows {
        let _ = writeln!(out, "{}  domains={}  complexity={:.6}", r.model_id, r.domains, r.complexity.total);
        for (id, c) in &r.complexity.per_domain {
            let _ = writeln!(out, "    {id}  {c:.6}");
        }
    }
    Ok(out)
}

fn probe_writable(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .and_then(|_| tempfile::NamedTempFile::new_in(dir).map(drop))
        .map_err(|e| CliError::Usage(format!("output directory {} is not writable: {e}", dir.display())))
}

/// Validates everything, then serves the search and writes `summary.json`.
pub fn cmd_run(cfg: &RunConfig) -> Result<RunSummary, CliError> {
    let tree = load_spec(&cfg.spec_path).map_err(|e| CliError::Usage(format!("{}: {e}", cfg.spec_path.display())))?;
    let master_cfg = cfg.master_config();
    master_cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let scheduler = Scheduler::new(tree.split(), cfg.classes.clone(), cfg.scheduler_config(), cfg.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    // fail on an unusable output directory before taking the port
    probe_writable(&cfg.output_dir)?;
    let master = Master::bind(master_cfg, scheduler).map_err(|e| CliError::Fatal(e.to_string()))?;
    if let Ok(addr) = master.local_addr() {
        log::info!("listening on {addr}");
    }
    let summary = master.serve().map_err(|e| CliError::Fatal(e.to_string()))?;
    let path = cfg.output_dir.join("summary.json");
    let v = serde_json::to_value(&summary).expect("serializable summary");
    std::fs::write(&path, serde_json::to_string_pretty(&v).expect("valid json") + "\n")
        .map_err(|e| CliError::Fatal(format!("{}: {e}", path.display())))?;
    Ok(summary)
}

/// Best loss per model recomputed from a `trials.jsonl` file.
pub fn best_from_ledger(path: &Path) -> std::io::Result<BTreeMap<String, f64>> {
    let mut best = BTreeMap::new();
    for t in read_trials(path)? {
        let b = best.entry(t.model_id).or_insert(t.loss);
        *b = f64::min(*b, t.loss);
    }
    Ok(best)
}

fn hostname() -> String {
    let mut buf = [0u8; 256];
    // gethostname writes a NUL-terminated name into the buffer
    let rc = unsafe { libc::gethostname(buf.as_mut_ptr().cast(), buf.len()) };
    if rc != 0 {
        return "worker".into();
    }
    let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
    String::from_utf8_lossy(&buf[..end]).into_owned()
}

pub fn worker_config(a: &WorkerArgs) -> Result<WorkerConfig, CliError> {
    if !(a.heartbeat_s > 0.0) || !a.heartbeat_s.is_finite() {
        return Err(CliError::Usage("--heartbeat-s must be positive".into()));
    }
    let id = a.worker_id.clone().unwrap_or_else(|| format!("{}-{}", hostname(), std::process::id()));
    let mut cfg = WorkerConfig::new(a.master.clone(), id, a.objective.clone());
    cfg.features = a.features.iter().cloned().collect();
    cfg.heartbeat_interval = Duration::from_secs_f64(a.heartbeat_s);
    cfg.max_reconnects = a.max_reconnects;
    cfg.scratch_root = a.scratch_dir.clone();
    Ok(cfg)
}

pub fn cmd_worker(a: WorkerArgs) -> Result<(), CliError> {
    let cfg = worker_config(&a)?;
    crate::net::worker_run(&cfg).map_err(|e| match e {
        crate::net::WorkerError::Config(m) => CliError::Usage(m),
        other => CliError::Fatal(other.to_string()),
    })
}

pub fn cmd_simulate(a: &SimulateArgs) -> Result<Comparison, CliError> {
    let mut scenario = load_scenario(&a.scenario).map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let policies = if a.policies.is_empty() { vec![Mode::Heuristic, Mode::Fcfs] } else { a.policies.clone() };
    let comparison = compare_policies(&scenario, &policies, a.seeds).map_err(|e| CliError::Fatal(e.to_string()))?;
    let v = serde_json::to_value(&comparison).expect("serializable comparison");
    std::fs::write(&a.out, serde_json::to_string_pretty(&v).expect("valid json") + "\n")
        .map_err(|e| CliError::Fatal(format!("{}: {e}", a.out.display())))?;
    Ok(comparison)
}

pub fn format_comparison(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>12}", "policy", "seed", "tasks", "tasks/hour");
    for r in &c.rows {
        let _ = writeln!(out, "{:<16} {:>8} {:>8} {:>12.2}", r.policy, r.seed, r.tasks_completed, r.throughput_per_hour);
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<16} {:>5} {:>12} {:>10} {:>12} {:>12}", "policy", "runs", "mean", "std", "min", "max");
    for (p, s) in &c.stats {
        let _ = writeln!(
            out,
            "{:<16} {:>5} {:>12.2} {:>10.2} {:>12.2} {:>12.2}",
            p, s.runs, s.mean, s.std_dev, s.min, s.max
        );
    }
    if let Some(r) = c.ratio {
        let _ = writeln!(out, "\nratio heuristic/fcfs {r:.4}");
    }
    out
}
