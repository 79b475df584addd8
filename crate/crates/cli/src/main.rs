use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use taskbank::bank::PolicyBank;
use taskbank::experiment::{
    collect_runs, parse_seed_list, provenance_line, run_seed, write_report, ExperimentConfig, Method,
};
use taskbank::metrics::{compute_rho, compute_xi, rho_seed};
use taskbank::netsim::{generate_tasks, read_task_file, write_task_file, TraceWriter};
use taskbank::par::{self, ExecMode};
use taskbank::rl::rollout_with;
use taskbank::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_MISSING: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

#[derive(Parser)]
#[command(name = "taskbank", version, about = "Build and evaluate policy banks for load balancing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task file from archetype templates.
    GenTasks(GenArgs),
    /// Group tasks into a policy bank for each seed.
    Build(RunArgs),
    /// Re-evaluate a saved bank.
    Eval(EvalArgs),
    /// Run a non-learning baseline (fp or ar).
    Baseline(RunArgs),
    /// Aggregate completed runs into report, summary and curve files.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 32)]
    count: usize,
    #[arg(long, default_value_t = 8)]
    archetypes: usize,
    /// Relative perturbation applied to each task's archetype template.
    #[arg(long, default_value_t = 0.1)]
    jitter: f64,
    #[arg(long, default_value_t = 4)]
    cells: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (defaults to `$TASKBANK_OUT/tasks.json`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, env = "TASKBANK_OUT", default_value = "taskbank-out", hide_env_values = true)]
    root: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// JSON file of flat dotted keys; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, env = "TASKBANK_OUT", hide_env_values = true)]
    out: Option<PathBuf>,
    /// fp | ar | ts | kt | pr | bg
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "bank-size")]
    bank_size: Option<usize>,
    #[arg(long = "sample-k")]
    sample_k: Option<usize>,
    /// A number, `inf`, `-inf`, or `auto` (pilot calibration).
    #[arg(long, allow_hyphen_values = true)]
    threshold: Option<String>,
    /// Which calibrated value `auto` picks: default | loose | tight.
    #[arg(long = "threshold-level")]
    threshold_level: Option<String>,
    /// Comma list or half-open range, e.g. `0..5`.
    #[arg(long)]
    seeds: Option<String>,
    #[arg(long = "env-steps")]
    env_steps: Option<usize>,
    #[arg(long = "eval-steps")]
    eval_steps: Option<usize>,
    #[arg(long = "episode-steps")]
    episode_steps: Option<usize>,
    /// Extra `key=value` overrides (dotted keys).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Continue interrupted runs from their checkpoints.
    #[arg(long)]
    resume: bool,
    /// Seeds run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Disable data-parallel evaluation inside a run.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Run directory holding `bank.json`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    tasks: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "eval-steps")]
    eval_steps: Option<usize>,
    /// Also write a per-step trace of every evaluated pair under `traces/`.
    #[arg(long)]
    trace: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Output root holding `runs/`.
    #[arg(long, env = "TASKBANK_OUT", default_value = "taskbank-out", hide_env_values = true)]
    out: PathBuf,
    /// Where to write the report files (defaults to the output root).
    #[arg(long)]
    dest: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) => EXIT_CONFIG,
            Error::Missing(_) | Error::Schema(_) => EXIT_MISSING,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

fn config_error(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_CONFIG, message: message.into() }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenTasks(a) => gen_tasks(a),
        Command::Build(a) => build(a, false),
        Command::Eval(a) => eval(a),
        Command::Baseline(a) => build(a, true),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn gen_tasks(a: GenArgs) -> Result<(), Failure> {
    if a.count == 0 || a.archetypes == 0 || a.cells < 2 {
        return Err(config_error("--count and --archetypes must be >= 1 and --cells >= 2"));
    }
    if !(0.0..1.0).contains(&a.jitter) {
        return Err(config_error("--jitter must be in [0, 1)"));
    }
    let tasks = generate_tasks(a.count, a.archetypes, a.jitter, a.cells, a.seed)?;
    let path = a.out.unwrap_or_else(|| a.root.join("tasks.json"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| config_error(format!("cannot create {}: {e}", parent.display())))?;
    }
    // An unwritable destination is a usage problem, not a runtime failure.
    write_task_file(&path, &tasks).map_err(|e| config_error(e.to_string()))?;
    println!("task_id\tarchetype");
    for t in &tasks {
        println!("{}\t{}", t.task_id, t.archetype.map(|a| a.to_string()).unwrap_or_default());
    }
    eprintln!("wrote {} tasks to {}", tasks.len(), path.display());
    Ok(())
}

fn load_config(a: &RunArgs) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure { code: EXIT_MISSING, message: format!("{}: {e}", path.display()) })?;
        cfg.apply_json(&text)?;
    }
    let mut flags: Vec<(&str, Value)> = Vec::new();
    let s = |v: &str| Value::String(v.to_string());
    if let Some(v) = &a.tasks {
        flags.push(("tasks", s(&v.to_string_lossy())));
    }
    if let Some(v) = &a.out {
        flags.push(("out", s(&v.to_string_lossy())));
    }
    if let Some(v) = &a.method {
        flags.push(("method", s(v)));
    }
    if let Some(v) = a.bank_size {
        flags.push(("bank.n", v.into()));
    }
    if let Some(v) = a.sample_k {
        flags.push(("bank.k", v.into()));
    }
    if let Some(v) = &a.threshold {
        flags.push(("scorer.threshold", s(v)));
    }
    if let Some(v) = &a.threshold_level {
        flags.push(("calibration.level", s(v)));
    }
    if let Some(v) = &a.seeds {
        flags.push(("seeds", Value::Array(parse_seed_list(v)?.into_iter().map(Value::from).collect())));
    }
    if let Some(v) = a.env_steps {
        flags.push(("ppo.total_env_steps", v.into()));
    }
    if let Some(v) = a.episode_steps {
        flags.push(("sim.episode_steps", v.into()));
    }
    if let Some(v) = a.eval_steps {
        flags.push(("eval.steps", v.into()));
    }
    for (k, v) in flags {
        cfg.set(k, &v)?;
    }
    for kv in &a.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| config_error(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        cfg.set(k.trim(), &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn build(a: RunArgs, baseline: bool) -> Result<(), Failure> {
    let cfg = load_config(&a)?;
    if baseline && cfg.method.is_learning() {
        return Err(config_error(format!("baseline runs fp or ar, not {}", cfg.method)));
    }
    if !baseline && !cfg.method.is_learning() {
        return Err(config_error(format!("use `baseline` for method {}", cfg.method)));
    }
    let tasks = read_task_file(&cfg.task_file)?;
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| config_error(format!("{}: {e}", cfg.out_dir.display())))?;
    let mode = if a.sequential { ExecMode::Sequential } else { ExecMode::Parallel };
    let records = par::with_jobs(a.jobs, || {
        par::try_map(if a.jobs > 1 { ExecMode::Parallel } else { ExecMode::Sequential }, &cfg.seeds, |&seed| {
            run_seed(&cfg, &tasks, seed, mode, a.resume)
        })
    })?;
    println!("method\tseed\trho\tw_steps\txi\tnum_trained");
    for r in &records {
        let e = &r.result;
        println!(
            "{}\t{}\t{:.3}\t{}\t{}\t{}",
            e.method,
            e.seed,
            e.rho,
            e.w_steps.map(|w| w.to_string()).unwrap_or_else(|| "-".into()),
            e.xi.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into()),
            e.num_trained.map(|x| x.to_string()).unwrap_or_else(|| "-".into()),
        );
    }
    eprintln!("runs written under {}", cfg.out_dir.join("runs").join(cfg.run_name(tasks.len())).display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Failure> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &a.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure { code: EXIT_MISSING, message: format!("{}: {e}", path.display()) })?;
        cfg.apply_json(&text)?;
    }
    if let Some(v) = a.eval_steps {
        cfg.set("eval.steps", &v.into())?;
    }
    let tasks = read_task_file(&a.tasks)?;
    let bank = PolicyBank::load(&a.run)?;
    let (rho, per_task) = compute_rho(&bank, &tasks, &cfg.sim, cfg.eval_steps, a.seed, ExecMode::Parallel)?;
    let out = a.run.join("eval.csv");
    let mut text = provenance_line(&bank_hash(&a.run)) + "\npolicy_id,task_id,reward\n";
    for p in &per_task {
        text.push_str(&format!("{},{},{}\n", p.policy_id, p.task_id, p.reward));
    }
    std::fs::write(&out, text)
        .map_err(|e| Failure { code: EXIT_RUNTIME, message: format!("{}: {e}", out.display()) })?;
    if a.trace {
        write_traces(&bank, &tasks, &cfg, a.seed, &a.run.join("traces"))?;
    }
    let xi = compute_xi(rho, bank.w_steps).ok();
    println!("rho\t{rho:.4}");
    println!("w_steps\t{}", bank.w_steps);
    println!("xi\t{}", xi.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()));
    println!("pairs\t{}", per_task.len());
    Ok(())
}

/// Replays each evaluation rollout, writing `<policy>__<task>.csv`.
fn write_traces(
    bank: &PolicyBank,
    tasks: &[taskbank::netsim::TrafficTask],
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
) -> Result<(), Failure> {
    let io = |p: &Path, e: std::io::Error| Failure { code: EXIT_RUNTIME, message: format!("{}: {e}", p.display()) };
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    for (pid, tid) in bank.coverage() {
        let policy = bank.get(&pid).expect("coverage lists banked policies");
        let Some(task) = tasks.iter().find(|t| t.task_id == tid) else { continue };
        let mut trace = TraceWriter::new(Vec::new(), cfg.sim.n_cells)?;
        rollout_with(&mut &*policy, task, &cfg.sim, cfg.eval_steps, rho_seed(seed, &tid), &mut |s| trace.record(s))?;
        let path = dir.join(format!("{pid}__{tid}.csv"));
        std::fs::write(&path, trace.into_inner()).map_err(|e| io(&path, e))?;
    }
    Ok(())
}

/// The config hash recorded by the run that wrote `dir`, if any.
fn bank_hash(dir: &Path) -> String {
    std::fs::read_to_string(dir.join("result.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Value>(&t).ok())
        .and_then(|v| v.get("config_hash").and_then(Value::as_str).map(str::to_string))
        .unwrap_or_else(|| "unknown".into())
}

fn report(a: ReportArgs) -> Result<(), Failure> {
    let runs = collect_runs(&a.out).map_err(|e| match e {
        Error::Missing(p) => {
            Failure { code: EXIT_MISSING, message: format!("no completed runs under {}", p.display()) }
        }
        other => other.into(),
    })?;
    let dest = a.dest.unwrap_or_else(|| a.out.clone());
    write_report(&runs, &dest)?;
    let methods: std::collections::BTreeSet<Method> =
        runs.iter().filter_map(|r| r.result.method.parse().ok()).collect();
    eprintln!(
        "aggregated {} runs ({}) into {}",
        runs.len(),
        methods.iter().map(|m| m.as_str()).collect::<Vec<_>>().join(", "),
        dest.display()
    );
    Ok(())
}
