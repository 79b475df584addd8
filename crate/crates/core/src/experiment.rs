//! Experiment orchestration: methods, threshold calibration, run
//! directories, and report aggregation.
//!
//! A run directory holds everything one (method, seed) produced:
//!
//! ```text
//! <out>/runs/<method>-n<n>-t<threshold>/seed-<seed>/
//!     result.json  per_task.csv  curve.csv  calibration.json
//!     bank.json  experiences/  rng.json
//!     grouping_log.csv  compat_log.csv  merges.jsonl
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bank::{write_atomic, PolicyBank};
use crate::compat::{calibrate_threshold, g_min_series, Scorer, ScorerConfig, ScorerKind, Thresholds};
use crate::distill::DistillConfig;
use crate::grouping::{
    format_threshold, parse_threshold, rollout_seed, train_tasks, CachedTrainer, GroupingConfig, GroupingRun,
    IterationSummary, Observer, PpoTrainer, Trainer,
};
use crate::metrics::{
    ar_baseline, compute_rho, compute_xi, fp_baseline, mean_reward, rho_seed, EvalResult, PairReward,
};
use crate::netsim::{SimConfig, TrafficTask};
use crate::par::{self, ExecMode};
use crate::rl::{evaluate_policy, PpoConfig};
use crate::{seed, Error, Result, SCHEMA_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Fp,
    Ar,
    Ts,
    Kt,
    Pr,
    Bg,
}

impl Method {
    pub const ALL: [Method; 6] = [Method::Fp, Method::Ar, Method::Ts, Method::Kt, Method::Pr, Method::Bg];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Fp => "fp",
            Method::Ar => "ar",
            Method::Ts => "ts",
            Method::Kt => "kt",
            Method::Pr => "pr",
            Method::Bg => "bg",
        }
    }

    pub fn is_learning(self) -> bool {
        !matches!(self, Method::Fp | Method::Ar)
    }

    pub fn scorer_kind(self) -> Option<ScorerKind> {
        match self {
            Method::Kt => Some(ScorerKind::KpiThreshold),
            Method::Pr => Some(ScorerKind::Pearson),
            Method::Bg => Some(ScorerKind::Binseg),
            _ => None,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?} (expected fp|ar|ts|kt|pr|bg)")))
    }
}

/// Expert KT threshold on the per-step minimum cell throughput: the same
/// 1 Mbps floor `chi` the reward counts cells against.
pub const KT_DEFAULT_THRESHOLD_MBPS: f64 = 1.0;

/// Which calibrated threshold `auto` resolves to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdLevel {
    #[default]
    Default,
    Loose,
    Tight,
}

impl ThresholdLevel {
    pub fn pick(self, t: &Thresholds) -> f64 {
        match self {
            ThresholdLevel::Default => t.default,
            ThresholdLevel::Loose => t.loose,
            ThresholdLevel::Tight => t.tight,
        }
    }
}

impl FromStr for ThresholdLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "default" => Ok(ThresholdLevel::Default),
            "loose" => Ok(ThresholdLevel::Loose),
            "tight" => Ok(ThresholdLevel::Tight),
            _ => Err(Error::Config(format!("unknown threshold level {s:?}"))),
        }
    }
}

/// A fixed threshold or `auto` (pilot calibration).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Auto,
    Value(f64),
}

impl FromStr for ThresholdSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "auto" {
            Ok(ThresholdSpec::Auto)
        } else {
            parse_threshold(s).map(ThresholdSpec::Value)
        }
    }
}

impl fmt::Display for ThresholdSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdSpec::Auto => f.write_str("auto"),
            ThresholdSpec::Value(v) => f.write_str(&format_threshold(*v)),
        }
    }
}

impl Serialize for ThresholdSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ThresholdSpec::Value(v) if v.is_finite() => s.serialize_f64(*v),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for ThresholdSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match Value::deserialize(d)? {
            Value::Number(n) => {
                n.as_f64().map(ThresholdSpec::Value).ok_or_else(|| serde::de::Error::custom("threshold out of range"))
            }
            Value::String(s) => s.parse().map_err(serde::de::Error::custom),
            other => Err(serde::de::Error::custom(format!("invalid threshold {other}"))),
        }
    }
}

/// Everything needed to run one method over a seed list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task_file: PathBuf,
    pub out_dir: PathBuf,
    pub method: Method,
    pub n: usize,
    pub k: usize,
    /// `None` selects the method default: calibrated for PR/BG, the expert
    /// value [`KT_DEFAULT_THRESHOLD_MBPS`] for KT.
    pub threshold: Option<ThresholdSpec>,
    pub threshold_level: ThresholdLevel,
    /// Tasks trained and cross-scored to calibrate an `auto` threshold.
    pub pilot_tasks: usize,
    pub seeds: Vec<u64>,
    pub eval_steps: usize,
    pub scorer: ScorerConfig,
    pub ppo: PpoConfig,
    pub sim: SimConfig,
    pub distill: DistillConfig,
    /// Shared trained-policy cache; `<out_dir>/cache` when unset.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let sim = SimConfig::default();
        ExperimentConfig {
            task_file: PathBuf::from("tasks.json"),
            out_dir: PathBuf::from("taskbank-out"),
            method: Method::Bg,
            n: 8,
            k: 8,
            threshold: None,
            threshold_level: ThresholdLevel::Default,
            pilot_tasks: 8,
            seeds: (0..5).collect(),
            eval_steps: sim.episode_steps,
            scorer: ScorerConfig::default(),
            ppo: PpoConfig::desk_scale(),
            sim,
            distill: DistillConfig::default(),
            cache_dir: None,
        }
    }
}

fn set_json_field<T: Serialize + serde::de::DeserializeOwned>(
    target: &mut T,
    field: &str,
    value: &Value,
) -> Result<()> {
    let mut obj = serde_json::to_value(&*target)?;
    let map = obj.as_object_mut().expect("config sections serialise as objects");
    if !map.contains_key(field) {
        return Err(Error::Config(format!("unknown config key {field:?}")));
    }
    map.insert(field.to_string(), value.clone());
    *target = serde_json::from_value(obj).map_err(|e| Error::Config(format!("{field}: {e}")))?;
    Ok(())
}

fn as_str(key: &str, v: &Value) -> Result<String> {
    match v {
        Value::String(s) => Ok(s.clone()),
        Value::Number(n) => Ok(n.to_string()),
        _ => Err(Error::Config(format!("{key}: expected a string"))),
    }
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .or_else(|| v.as_str().and_then(|s| s.parse().ok()))
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer")))
}

impl ExperimentConfig {
    /// Sets one flat dotted key, e.g. `bank.n`, `scorer.threshold`,
    /// `ppo.total_env_steps`.
    pub fn set(&mut self, key: &str, value: &Value) -> Result<()> {
        match key {
            "tasks" | "task_file" => self.task_file = PathBuf::from(as_str(key, value)?),
            "out" | "out_dir" => self.out_dir = PathBuf::from(as_str(key, value)?),
            "cache_dir" => self.cache_dir = Some(PathBuf::from(as_str(key, value)?)),
            "method" => self.method = as_str(key, value)?.parse()?,
            "bank.n" => self.n = as_usize(key, value)?,
            "bank.k" => self.k = as_usize(key, value)?,
            "eval.steps" => self.eval_steps = as_usize(key, value)?,
            "calibration.pilot_tasks" => self.pilot_tasks = as_usize(key, value)?,
            "calibration.level" | "scorer.threshold_level" => self.threshold_level = as_str(key, value)?.parse()?,
            "scorer.threshold" => self.threshold = Some(as_str(key, value)?.parse()?),
            "scorer.kind" => {
                let kind: ScorerKind = as_str(key, value)?.parse()?;
                self.method = match kind {
                    ScorerKind::Binseg => Method::Bg,
                    ScorerKind::Pearson => Method::Pr,
                    ScorerKind::KpiThreshold => Method::Kt,
                };
            }
            "seeds" => {
                self.seeds = match value {
                    Value::Array(a) => a
                        .iter()
                        .map(|v| v.as_u64().ok_or_else(|| Error::Config("seeds: expected integers".into())))
                        .collect::<Result<_>>()?,
                    Value::String(s) => parse_seed_list(s)?,
                    _ => return Err(Error::Config("seeds: expected a list".into())),
                }
            }
            _ => {
                let (section, field) =
                    key.split_once('.').ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
                match section {
                    "scorer" => set_json_field(&mut self.scorer, field, value)?,
                    "ppo" => set_json_field(&mut self.ppo, field, value)?,
                    "sim" => set_json_field(&mut self.sim, field, value)?,
                    "distill" => set_json_field(&mut self.distill, field, value)?,
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
            }
        }
        Ok(())
    }

    /// Applies a flat JSON object of dotted keys.
    pub fn apply_json(&mut self, text: &str) -> Result<()> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        let map =
            v.as_object().ok_or_else(|| Error::Config("config file must be a JSON object of dotted keys".into()))?;
        for (k, v) in map {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.eval_steps == 0 {
            return Err(Error::Config("eval.steps must be >= 1".into()));
        }
        self.sim.validate()?;
        if self.method.is_learning() {
            if self.n == 0 || self.k == 0 {
                return Err(Error::Config("bank.n and bank.k must be >= 1".into()));
            }
            self.ppo.validate()?;
            self.distill.validate()?;
            Scorer::new(self.scorer.clone())?;
            if self.threshold_spec() == ThresholdSpec::Auto
                && self.method.scorer_kind().is_some()
                && self.pilot_tasks < 2
            {
                return Err(Error::Config("calibration.pilot_tasks must be >= 2".into()));
            }
        }
        Ok(())
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }

    pub fn trainer(&self) -> CachedTrainer {
        CachedTrainer { inner: PpoTrainer { sim: self.sim.clone(), ppo: self.ppo.clone() }, dir: self.cache_dir() }
    }

    pub fn threshold_spec(&self) -> ThresholdSpec {
        match (self.threshold, self.method) {
            (Some(t), _) => t,
            (None, Method::Kt) => ThresholdSpec::Value(KT_DEFAULT_THRESHOLD_MBPS),
            (None, _) => ThresholdSpec::Auto,
        }
    }

    /// Effective bank size: TS keeps every trained policy.
    pub fn effective_n(&self, n_tasks: usize) -> usize {
        if self.method == Method::Ts {
            n_tasks
        } else {
            self.n
        }
    }

    /// Directory name shared by all seeds of this configuration.
    pub fn run_name(&self, n_tasks: usize) -> String {
        match self.method {
            Method::Fp | Method::Ar => self.method.to_string(),
            Method::Ts => format!("ts-n{}", n_tasks),
            m => {
                let t = match self.threshold_spec() {
                    ThresholdSpec::Auto => format!("auto-{}", level_name(self.threshold_level)),
                    ThresholdSpec::Value(v) => format_threshold(v),
                };
                format!("{m}-n{}-k{}-t{t}", self.n, self.k)
            }
        }
    }

    pub fn run_dir(&self, n_tasks: usize, seed: u64) -> PathBuf {
        self.out_dir.join("runs").join(self.run_name(n_tasks)).join(format!("seed-{seed}"))
    }

    /// Digest of everything that affects results, except seed list and paths.
    pub fn hash(&self, tasks: &[TrafficTask]) -> String {
        let mut c = self.clone();
        c.task_file = PathBuf::new();
        c.out_dir = PathBuf::new();
        c.cache_dir = None;
        c.seeds.clear();
        c.threshold = Some(c.threshold_spec());
        if c.method.scorer_kind().is_none() {
            c.threshold = None;
            c.scorer = ScorerConfig::default();
        }
        let json = serde_json::to_string(&(SCHEMA_VERSION, &c, tasks)).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }

    fn grouping(&self, n_tasks: usize, threshold: f64, seed: u64) -> GroupingConfig {
        let mut scorer = self.scorer.clone();
        if let Some(kind) = self.method.scorer_kind() {
            scorer.kind = kind;
        }
        GroupingConfig {
            n: self.effective_n(n_tasks),
            k: self.k,
            scorer,
            threshold,
            ppo: self.ppo.clone(),
            sim: self.sim.clone(),
            distill: self.distill.clone(),
            eval_steps: self.eval_steps,
            master_seed: seed,
        }
    }
}

fn level_name(l: ThresholdLevel) -> &'static str {
    match l {
        ThresholdLevel::Default => "default",
        ThresholdLevel::Loose => "loose",
        ThresholdLevel::Tight => "tight",
    }
}

/// Parses `0,1,2` or a range `0..5`.
pub fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config(format!("invalid seed list {s:?}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return if a < b { Ok((a..b).collect()) } else { Err(bad()) };
    }
    s.split(',').map(|p| p.trim().parse().map_err(|_| bad())).collect()
}

/// Pilot cross-scoring result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub schema: u32,
    pub kind: ScorerKind,
    pub pilot_task_ids: Vec<String>,
    /// Pairwise scores on the user-facing scale (Mbps of `G_min` for KT).
    pub scores: Vec<f64>,
    pub thresholds: Thresholds,
}

/// Trains policies on a seeded subset of tasks and scores every ordered
/// pair `(policy of a, task b)`, `a != b`. The median of those scores is the
/// default threshold. Pilot training is calibration overhead and is not
/// counted in `w`.
pub fn calibrate(
    tasks: &[TrafficTask],
    gcfg: &GroupingConfig,
    pilot_tasks: usize,
    trainer: &dyn Trainer,
    mode: ExecMode,
) -> Result<Calibration> {
    use rand::seq::SliceRandom;
    let scorer = Scorer::new(gcfg.scorer.clone())?;
    let mut pilot: Vec<&TrafficTask> = tasks.iter().collect();
    pilot.shuffle(&mut seed::rng(seed::derive(gcfg.master_seed, "pilot", "")));
    pilot.truncate(pilot_tasks.min(tasks.len()));
    if pilot.len() < 2 {
        return Err(Error::Input("calibration needs at least two tasks".into()));
    }
    let trained = train_tasks(&pilot, trainer, gcfg, mode)?;
    let pairs: Vec<(usize, usize)> =
        (0..pilot.len()).flat_map(|a| (0..pilot.len()).filter(move |&b| b != a).map(move |b| (a, b))).collect();
    let scores = par::try_map(mode, &pairs, |&(a, b)| {
        let policy = &trained[a].0;
        let task = pilot[b];
        let (exp, _) =
            evaluate_policy(policy, task, &gcfg.sim, gcfg.eval_steps, rollout_seed(gcfg.master_seed, &task.task_id))?;
        match scorer.kind() {
            ScorerKind::KpiThreshold => Ok(g_min_series(&exp)?.into_iter().fold(f64::INFINITY, f64::min)),
            _ => Ok::<_, Error>(scorer.assess(&policy.policy_id, &policy.experiences, &exp, 0.0)?.distance),
        }
    })?;
    Ok(Calibration {
        schema: SCHEMA_VERSION,
        kind: scorer.kind(),
        pilot_task_ids: pilot.iter().map(|t| t.task_id.clone()).collect(),
        thresholds: calibrate_threshold(&scores)?,
        scores,
    })
}

/// One curve point: bank state after an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub tasks_processed: usize,
    pub num_trained: usize,
    pub rho: f64,
}

struct CurveObserver<'a> {
    tasks: &'a [TrafficTask],
    gcfg: &'a GroupingConfig,
    mode: ExecMode,
    path: Option<PathBuf>,
    points: Vec<CurvePoint>,
}

impl Observer for CurveObserver<'_> {
    fn iteration(&mut self, bank: &PolicyBank, s: &IterationSummary, _: &[&TrafficTask]) -> Result<()> {
        let (rho, _) =
            compute_rho(bank, self.tasks, &self.gcfg.sim, self.gcfg.eval_steps, self.gcfg.master_seed, self.mode)?;
        let p = CurvePoint {
            iteration: s.iteration,
            tasks_processed: s.tasks_processed,
            num_trained: bank.num_trained(),
            rho,
        };
        if let Some(path) = &self.path {
            let mut f = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
            use std::io::Write;
            writeln!(f, "{},{},{},{}", p.iteration, p.tasks_processed, p.num_trained, p.rho)
                .map_err(|e| Error::io(path, e))?;
        }
        self.points.push(p);
        Ok(())
    }
}

/// `# taskbank schema=<v> config=<hash>`.
pub fn provenance_line(config_hash: &str) -> String {
    format!("# taskbank schema={SCHEMA_VERSION} config={config_hash}")
}

/// Parses a provenance line into `(schema, config_hash)`.
pub fn parse_provenance(line: &str) -> Option<(u32, String)> {
    let rest = line.strip_prefix("# taskbank ")?;
    let mut schema = None;
    let mut config = None;
    for part in rest.split_whitespace() {
        if let Some(v) = part.strip_prefix("schema=") {
            schema = v.parse().ok();
        } else if let Some(v) = part.strip_prefix("config=") {
            config = Some(v.to_string());
        }
    }
    Some((schema?, config?))
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn threshold_cell(t: Option<f64>) -> String {
    t.map(format_threshold).unwrap_or_default()
}

/// Stored alongside each run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub config_hash: String,
    pub run_name: String,
    pub result: EvalResult,
    pub curve: Vec<CurvePoint>,
}

fn write_per_task(path: &Path, hash: &str, per_task: &[PairReward]) -> Result<()> {
    let mut s = provenance_line(hash) + "\npolicy_id,task_id,reward\n";
    for p in per_task {
        s.push_str(&format!("{},{},{}\n", p.policy_id, p.task_id, p.reward));
    }
    write_atomic(path, &s)
}

/// Reads `per_task.csv` back.
pub fn read_per_task(path: &Path) -> Result<(String, Vec<PairReward>)> {
    let (hash, rows) = read_tagged_csv(path)?;
    let per_task = rows
        .iter()
        .map(|r| {
            let reward = r.get(2).and_then(|v| v.parse().ok());
            match (r.first(), r.get(1), reward) {
                (Some(p), Some(t), Some(reward)) => Ok(PairReward { policy_id: p.clone(), task_id: t.clone(), reward }),
                _ => Err(Error::Input(format!("{}: malformed row {r:?}", path.display()))),
            }
        })
        .collect::<Result<_>>()?;
    Ok((hash, per_task))
}

/// Reads a CSV that starts with a provenance line; returns the config hash
/// and the data rows (header skipped). Refuses other schema versions.
pub fn read_tagged_csv(path: &Path) -> Result<(String, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let mut lines = text.lines();
    let (schema, hash) = lines
        .next()
        .and_then(parse_provenance)
        .ok_or_else(|| Error::Schema(format!("{}: missing provenance line", path.display())))?;
    if schema != SCHEMA_VERSION {
        return Err(Error::Schema(format!("{}: schema {schema}, expected {SCHEMA_VERSION}", path.display())));
    }
    lines.next();
    let rows = lines.filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect();
    Ok((hash, rows))
}

/// Runs one seed of the configured method and writes its run directory.
/// With `resume`, a grouping run continues from its checkpoint.
pub fn run_seed(
    cfg: &ExperimentConfig,
    tasks: &[TrafficTask],
    seed: u64,
    mode: ExecMode,
    resume: bool,
) -> Result<RunRecord> {
    cfg.validate()?;
    let dir = cfg.run_dir(tasks.len(), seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash(tasks);
    let run_name = cfg.run_name(tasks.len());

    let (result, curve) = if cfg.method.is_learning() {
        run_learning(cfg, tasks, seed, mode, resume, &dir, &hash)?
    } else {
        let per_task = par::try_map(mode, tasks, |t| {
            let s = rho_seed(seed, &t.task_id);
            let reward = match cfg.method {
                Method::Fp => fp_baseline(t, &cfg.sim, cfg.eval_steps, s)?,
                _ => ar_baseline(t, &cfg.sim, cfg.eval_steps, s)?,
            };
            Ok::<_, Error>(PairReward { policy_id: cfg.method.to_string(), task_id: t.task_id.clone(), reward })
        })?;
        let rho = mean_reward(&per_task)?;
        let result = EvalResult {
            method: cfg.method.to_string(),
            seed,
            n: None,
            threshold: None,
            rho,
            w_steps: None,
            xi: None,
            num_trained: None,
            per_task,
        };
        (result, Vec::new())
    };

    write_per_task(&dir.join("per_task.csv"), &hash, &result.per_task)?;
    let record = RunRecord { schema: SCHEMA_VERSION, config_hash: hash, run_name, result, curve };
    write_atomic(&dir.join("result.json"), &(serde_json::to_string_pretty(&record)? + "\n"))?;
    Ok(record)
}

fn run_learning(
    cfg: &ExperimentConfig,
    tasks: &[TrafficTask],
    seed: u64,
    mode: ExecMode,
    resume: bool,
    dir: &Path,
    hash: &str,
) -> Result<(EvalResult, Vec<CurvePoint>)> {
    let trainer = cfg.trainer();
    let threshold = match (cfg.method, cfg.threshold_spec()) {
        (Method::Ts, _) => f64::NEG_INFINITY,
        (_, ThresholdSpec::Value(v)) => v,
        (_, ThresholdSpec::Auto) => {
            let cal_path = dir.join("calibration.json");
            let cal =
                match fs::read_to_string(&cal_path).ok().and_then(|t| serde_json::from_str::<Calibration>(&t).ok()) {
                    Some(c) if resume && c.schema == SCHEMA_VERSION => c,
                    _ => {
                        let gcfg = cfg.grouping(tasks.len(), 0.0, seed);
                        let c = calibrate(tasks, &gcfg, cfg.pilot_tasks, &trainer, mode)?;
                        write_atomic(&cal_path, &(serde_json::to_string_pretty(&c)? + "\n"))?;
                        c
                    }
                };
            cfg.threshold_level.pick(&cal.thresholds)
        }
    };
    let gcfg = cfg.grouping(tasks.len(), threshold, seed);
    let curve_path = dir.join("curve.csv");

    let resumable = resume && dir.join("rng.json").exists();
    let mut run = if resumable {
        GroupingRun::resume(tasks, gcfg.clone(), dir)?
    } else {
        GroupingRun::new(tasks, gcfg.clone())?.with_dir(dir)?
    };
    let mut points = Vec::new();
    if resumable {
        let done = run.bank().iteration;
        if let Ok((_, rows)) = read_tagged_csv(&curve_path) {
            for r in rows {
                let p = parse_curve_row(&r, &curve_path)?;
                if p.iteration < done {
                    points.push(p);
                }
            }
        }
    }
    let mut s = provenance_line(hash) + "\niteration,tasks_processed,num_trained,rho\n";
    for p in &points {
        s.push_str(&format!("{},{},{},{}\n", p.iteration, p.tasks_processed, p.num_trained, p.rho));
    }
    write_atomic(&curve_path, &s)?;

    let mut obs = CurveObserver { tasks, gcfg: &gcfg, mode, path: Some(curve_path), points };
    run.run(&trainer, mode, &mut obs)?;
    let bank = run.into_bank();
    let (rho, per_task) = compute_rho(&bank, tasks, &gcfg.sim, gcfg.eval_steps, seed, mode)?;
    let result = EvalResult {
        method: cfg.method.to_string(),
        seed,
        n: Some(gcfg.n),
        threshold: Some(threshold),
        rho,
        w_steps: Some(bank.w_steps),
        xi: Some(compute_xi(rho, bank.w_steps)?),
        num_trained: Some(bank.num_trained()),
        per_task,
    };
    Ok((result, obs.points))
}

/// Runs a limited number of grouping iterations and stops as if
/// interrupted; used to exercise checkpoint resume.
pub fn run_seed_partial(
    cfg: &ExperimentConfig,
    tasks: &[TrafficTask],
    seed: u64,
    iterations: usize,
    mode: ExecMode,
) -> Result<()> {
    cfg.validate()?;
    let dir = cfg.run_dir(tasks.len(), seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let hash = cfg.hash(tasks);
    let threshold = match (cfg.method, cfg.threshold_spec()) {
        (Method::Ts, _) => f64::NEG_INFINITY,
        (_, ThresholdSpec::Value(v)) => v,
        (_, ThresholdSpec::Auto) => return Err(Error::Config("partial runs need an explicit threshold".into())),
    };
    let gcfg = cfg.grouping(tasks.len(), threshold, seed);
    let curve_path = dir.join("curve.csv");
    write_atomic(&curve_path, &(provenance_line(&hash) + "\niteration,tasks_processed,num_trained,rho\n"))?;
    let mut run = GroupingRun::new(tasks, gcfg.clone())?.with_dir(&dir)?;
    let mut obs = CurveObserver { tasks, gcfg: &gcfg, mode, path: Some(curve_path), points: Vec::new() };
    for _ in 0..iterations {
        if run.is_finished() {
            break;
        }
        run.step(&cfg.trainer(), mode, &mut obs)?;
    }
    Ok(())
}

fn parse_curve_row(r: &[String], path: &Path) -> Result<CurvePoint> {
    let bad = || Error::Input(format!("{}: malformed curve row {r:?}", path.display()));
    Ok(CurvePoint {
        iteration: r.first().and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        tasks_processed: r.get(1).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        num_trained: r.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        rho: r.get(3).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
    })
}

/// Loads every `result.json` below `<root>/runs`. Fails with
/// [`Error::Missing`] when there are none.
pub fn collect_runs(root: &Path) -> Result<Vec<RunRecord>> {
    let runs = root.join("runs");
    let mut out = Vec::new();
    let mut dirs: Vec<PathBuf> = match fs::read_dir(&runs) {
        Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect(),
        Err(_) => return Err(Error::Missing(runs)),
    };
    dirs.sort();
    for d in dirs {
        let mut seeds: Vec<PathBuf> = fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        seeds.sort();
        for s in seeds {
            let path = s.join("result.json");
            if !path.exists() {
                continue;
            }
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let rec: RunRecord =
                serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
            if rec.schema != SCHEMA_VERSION {
                return Err(Error::Schema(format!(
                    "{} has schema {}, expected {SCHEMA_VERSION}",
                    path.display(),
                    rec.schema
                )));
            }
            out.push(rec);
        }
    }
    if out.is_empty() {
        return Err(Error::Missing(runs));
    }
    out.sort_by(|a, b| (&a.run_name, a.result.seed).cmp(&(&b.run_name, b.result.seed)));
    Ok(out)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub const REPORT_HEADER: &str = "method,seed,n,threshold,rho,w_steps,xi,num_trained";
pub const SUMMARY_HEADER: &str =
    "method,n,threshold,runs,rho_mean,rho_std,w_steps_mean,xi_mean,xi_std,num_trained_mean,num_trained_std";
pub const CURVES_HEADER: &str = "method,n,threshold,seed,iteration,tasks_processed,num_trained,rho";

/// Aggregated row of `summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub n: Option<usize>,
    pub threshold_label: String,
    pub runs: usize,
    pub rho: (f64, f64),
    pub w_steps_mean: Option<f64>,
    pub xi: Option<(f64, f64)>,
    pub num_trained: Option<(f64, f64)>,
}

/// Groups runs by configuration (run directory name).
pub fn summarize(runs: &[RunRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in runs {
        groups.entry(r.run_name.as_str()).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let first = &g[0].result;
            let rhos: Vec<f64> = g.iter().map(|r| r.result.rho).collect();
            let xis: Option<Vec<f64>> = g.iter().map(|r| r.result.xi).collect();
            let ws: Option<Vec<f64>> = g.iter().map(|r| r.result.w_steps.map(|w| w as f64)).collect();
            let nt: Option<Vec<f64>> = g.iter().map(|r| r.result.num_trained.map(|x| x as f64)).collect();
            let thresholds: Vec<Option<f64>> = g.iter().map(|r| r.result.threshold).collect();
            let threshold_label = if thresholds.iter().all(|t| *t == thresholds[0]) {
                threshold_cell(thresholds[0])
            } else {
                // Calibrated per seed; label by configuration.
                g[0].run_name.rsplit("-t").next().unwrap_or_default().to_string()
            };
            SummaryRow {
                method: first.method.clone(),
                n: first.n,
                threshold_label,
                runs: g.len(),
                rho: mean_std(&rhos),
                w_steps_mean: ws.map(|w| mean_std(&w).0),
                xi: xis.map(|x| mean_std(&x)),
                num_trained: nt.map(|x| mean_std(&x)),
            }
        })
        .collect()
}

/// Writes `report.csv`, `summary.csv`, `curves.csv` and `curves.svg` into
/// `out`. Refuses runs written under another schema version.
pub fn write_report(runs: &[RunRecord], out: &Path) -> Result<String> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut hashes: Vec<&str> = runs.iter().map(|r| r.config_hash.as_str()).collect();
    hashes.sort_unstable();
    hashes.dedup();
    let report_hash = hex::encode(&Sha256::digest(hashes.join(",").as_bytes())[..8]);
    let head = provenance_line(&report_hash);

    let mut report = format!("{head}\n{REPORT_HEADER}\n");
    for r in runs {
        let e = &r.result;
        report.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            e.method,
            e.seed,
            opt(e.n),
            threshold_cell(e.threshold),
            e.rho,
            opt(e.w_steps),
            opt(e.xi),
            opt(e.num_trained)
        ));
    }
    write_atomic(&out.join("report.csv"), &report)?;

    let mut summary = format!("{head}\n{SUMMARY_HEADER}\n");
    for s in summarize(runs) {
        summary.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.method,
            opt(s.n),
            s.threshold_label,
            s.runs,
            s.rho.0,
            s.rho.1,
            opt(s.w_steps_mean),
            opt(s.xi.map(|x| x.0)),
            opt(s.xi.map(|x| x.1)),
            opt(s.num_trained.map(|x| x.0)),
            opt(s.num_trained.map(|x| x.1)),
        ));
    }
    write_atomic(&out.join("summary.csv"), &summary)?;

    let mut curves = format!("{head}\n{CURVES_HEADER}\n");
    for r in runs {
        let e = &r.result;
        for p in &r.curve {
            curves.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                e.method,
                opt(e.n),
                threshold_cell(e.threshold),
                e.seed,
                p.iteration,
                p.tasks_processed,
                p.num_trained,
                p.rho
            ));
        }
    }
    write_atomic(&out.join("curves.csv"), &curves)?;
    write_atomic(&out.join("curves.svg"), &curves_svg(runs))?;
    Ok(report_hash)
}

/// A minimal line chart of rho against tasks processed, one line per run.
fn curves_svg(runs: &[RunRecord]) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let pts: Vec<&CurvePoint> = runs.iter().flat_map(|r| &r.curve).collect();
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\">\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"12\">Performance on processed tasks</text>\n"
    );
    if pts.is_empty() {
        return svg + "</svg>\n";
    }
    let xmax = pts.iter().map(|p| p.tasks_processed as f64).fold(1.0, f64::max);
    let ymin = pts.iter().map(|p| p.rho).fold(f64::INFINITY, f64::min);
    let ymax = pts.iter().map(|p| p.rho).fold(f64::NEG_INFINITY, f64::max);
    let span = (ymax - ymin).max(1e-9);
    let sx = |x: f64| pad + x / xmax * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - (y - ymin) / span * (h - 2.0 * pad);
    svg.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n\
         <text x=\"{2}\" y=\"{3}\" font-size=\"11\">tasks processed</text>\n",
        h - pad,
        w - pad,
        w / 2.0 - 40.0,
        h - 15.0
    ));
    let palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
    for (i, r) in runs.iter().filter(|r| !r.curve.is_empty()).enumerate() {
        let path: Vec<String> =
            r.curve.iter().map(|p| format!("{:.1},{:.1}", sx(p.tasks_processed as f64), sy(p.rho))).collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{}\" points=\"{}\"><title>{} seed {}</title></polyline>\n",
            palette[i % palette.len()],
            path.join(" "),
            r.run_name,
            r.result.seed
        ));
    }
    svg + "</svg>\n"
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn dotted_keys_reach_nested_sections() {
        let mut c = ExperimentConfig::default();
        c.set("bank.n", &json!(4)).unwrap();
        c.set("ppo.total_env_steps", &json!(4000)).unwrap();
        c.set("scorer.threshold", &json!("auto")).unwrap();
        c.set("scorer.window_fraction", &json!(0.2)).unwrap();
        c.set("seeds", &json!("0..3")).unwrap();
        c.set("method", &json!("kt")).unwrap();
        assert_eq!((c.n, c.ppo.total_env_steps, c.seeds.clone()), (4, 4000, vec![0, 1, 2]));
        assert_eq!(c.scorer.window_fraction, 0.2);
        assert_eq!(c.method, Method::Kt);
        c.set("scorer.threshold", &json!(0.3)).unwrap();
        assert_eq!(c.threshold, Some(ThresholdSpec::Value(0.3)));
        assert!(c.set("ppo.nope", &json!(1)).is_err());
        assert!(c.set("bogus", &json!(1)).is_err());
        assert!(c.set("method", &json!("xx")).is_err());
    }

    #[test]
    fn provenance_lines_parse() {
        let l = provenance_line("abc123");
        assert_eq!(parse_provenance(&l), Some((SCHEMA_VERSION, "abc123".to_string())));
        assert_eq!(parse_provenance("method,seed"), None);
    }

    #[test]
    fn seed_lists() {
        assert_eq!(parse_seed_list("1,2,5").unwrap(), vec![1, 2, 5]);
        assert_eq!(parse_seed_list("2..4").unwrap(), vec![2, 3]);
        assert!(parse_seed_list("4..2").is_err());
    }

    #[test]
    fn mean_std_convention() {
        assert_eq!(mean_std(&[1.0, 2.0, 3.0]), (2.0, 1.0));
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }
}
