//! Scalable task grouping: sample tasks in chunks of `k`, reuse a banked
//! policy wherever its behaviour on the new task is compatible with its
//! training experience, train only the rest, and distil the bank back down
//! to `n` policies.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bank::{write_atomic, PolicyBank};
use crate::compat::{CompatReport, Scorer, ScorerConfig, COMPAT_LOG_HEADER};
use crate::distill::{cap_bank, DistillConfig};
use crate::netsim::{SimConfig, TrafficTask};
use crate::par::{self, ExecMode};
use crate::rl::{evaluate_policy, train_policy, Policy, PolicyFile, PpoConfig};
use crate::{seed, Error, Result, SCHEMA_VERSION};

/// Serialises `f64` thresholds, writing infinities as `"inf"` / `"-inf"`.
pub mod threshold_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&super::format_threshold(*v))
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Text(t) => super::parse_threshold(&t).map_err(serde::de::Error::custom),
        }
    }
}

/// Parses a number, `inf`, `+inf` or `-inf`.
pub fn parse_threshold(s: &str) -> Result<f64> {
    match s.trim() {
        "inf" | "+inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        t => t
            .parse::<f64>()
            .ok()
            .filter(|v| !v.is_nan())
            .ok_or_else(|| Error::Config(format!("invalid threshold {s:?}"))),
    }
}

pub fn format_threshold(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupingConfig {
    /// Maximum bank size.
    pub n: usize,
    /// Tasks sampled per iteration.
    pub k: usize,
    pub scorer: ScorerConfig,
    /// On the scorer's own scale (Mbps of `G_min` for the KPI scorer).
    #[serde(with = "threshold_serde")]
    pub threshold: f64,
    pub ppo: PpoConfig,
    pub sim: SimConfig,
    pub distill: DistillConfig,
    /// Control steps per evaluation rollout.
    pub eval_steps: usize,
    pub master_seed: u64,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            n: 8,
            k: 8,
            scorer: ScorerConfig::default(),
            threshold: 0.2,
            ppo: PpoConfig::desk_scale(),
            sim: SimConfig::default(),
            distill: DistillConfig::default(),
            eval_steps: SimConfig::default().episode_steps,
            master_seed: 0,
        }
    }
}

impl GroupingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k == 0 {
            return Err(Error::Config("bank size n and sample size k must be >= 1".into()));
        }
        if self.eval_steps == 0 {
            return Err(Error::Config("eval_steps must be >= 1".into()));
        }
        if self.threshold.is_nan() {
            return Err(Error::Config("threshold must not be NaN".into()));
        }
        self.ppo.validate()?;
        self.sim.validate()?;
        self.distill.validate()?;
        Scorer::new(self.scorer.clone())?;
        Ok(())
    }

    /// Short hex digest of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

/// Seed of the rollout that records a task's experience: the same for the
/// training self-evaluation and for every compatibility probe on that task.
pub fn rollout_seed(master: u64, task_id: &str) -> u64 {
    seed::derive(master, "rollout", task_id)
}

pub fn train_seed(master: u64, task_id: &str) -> u64 {
    seed::derive(master, "train", task_id)
}

pub fn policy_id_for(task_id: &str) -> String {
    format!("pi-{task_id}")
}

/// Produces a trained policy (without experiences) and its env-step count.
pub trait Trainer: Sync {
    fn train(&self, task: &TrafficTask, policy_id: &str, seed: u64) -> Result<(Policy, usize)>;
}

/// Trains with PPO on the simulator.
#[derive(Debug, Clone)]
pub struct PpoTrainer {
    pub sim: SimConfig,
    pub ppo: PpoConfig,
}

impl Trainer for PpoTrainer {
    fn train(&self, task: &TrafficTask, policy_id: &str, seed: u64) -> Result<(Policy, usize)> {
        train_policy(task, &self.sim, &self.ppo, seed, policy_id)
    }
}

/// Memoises another trainer on disk, keyed by the task, both configs and the
/// seed, so methods sharing a seed reuse identical trained policies.
#[derive(Debug, Clone)]
pub struct CachedTrainer {
    pub inner: PpoTrainer,
    pub dir: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    schema: u32,
    env_steps: usize,
    policy: PolicyFile,
}

impl CachedTrainer {
    fn key(&self, task: &TrafficTask, seed: u64) -> String {
        let json = serde_json::to_string(&(task, &self.inner.sim, &self.inner.ppo, seed)).expect("serialisable");
        hex::encode(&Sha256::digest(json.as_bytes())[..12])
    }
}

impl Trainer for CachedTrainer {
    fn train(&self, task: &TrafficTask, policy_id: &str, seed: u64) -> Result<(Policy, usize)> {
        let path = self.dir.join(format!("{}.json", self.key(task, seed)));
        if let Ok(text) = fs::read_to_string(&path) {
            if let Ok(entry) = serde_json::from_str::<CacheEntry>(&text) {
                if entry.schema == SCHEMA_VERSION {
                    let mut p = Policy::from_file(entry.policy, Vec::new())?;
                    p.policy_id = policy_id.to_string();
                    return Ok((p, entry.env_steps));
                }
            }
        }
        let (p, steps) = self.inner.train(task, policy_id, seed)?;
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let entry = CacheEntry { schema: SCHEMA_VERSION, env_steps: steps, policy: p.to_file() };
        write_atomic(&path, &serde_json::to_string(&entry)?)?;
        Ok((p, steps))
    }
}

/// Per-iteration log row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub tasks_sampled: usize,
    /// Tasks grouped under an existing policy in this iteration.
    pub num_compatible: usize,
    /// Tasks trained in this iteration.
    pub num_trained: usize,
    pub bank_size: usize,
    pub w_steps: u64,
    /// Tasks processed so far, including this iteration.
    pub tasks_processed: usize,
}

pub const GROUPING_LOG_HEADER: &str = "iteration,tasks_sampled,num_compatible,num_trained,bank_size,w_steps";

/// Sampling state persisted as `rng.json`. All randomness below the task
/// order is derived from the master seed and task ids, so the order and the
/// cursor fully describe where a run stands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub schema: u32,
    pub master_seed: u64,
    pub config_hash: String,
    pub order: Vec<String>,
    pub cursor: usize,
}

/// Outcome of scoring one batch of tasks against the bank.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assessment {
    /// `(task_id, policy_id)` pairs, in sampled order.
    pub grouped: Vec<(String, String)>,
    pub incompatible: Vec<String>,
    pub reports: Vec<CompatReport>,
}

/// Scores each task against every banked policy and assigns it to the
/// compatible policy of smallest distance.
pub fn assess(
    bank: &PolicyBank,
    tasks: &[&TrafficTask],
    scorer: &Scorer,
    threshold: f64,
    cfg: &GroupingConfig,
    mode: ExecMode,
) -> Result<Assessment> {
    let pairs: Vec<(usize, usize)> = (0..tasks.len()).flat_map(|t| (0..bank.len()).map(move |p| (t, p))).collect();
    let reports = par::try_map(mode, &pairs, |&(t, p)| {
        let policy = &bank.policies[p];
        let task = tasks[t];
        let seed = rollout_seed(cfg.master_seed, &task.task_id);
        let (exp, _) = evaluate_policy(policy, task, &cfg.sim, cfg.eval_steps, seed)?;
        scorer.assess(&policy.policy_id, &policy.experiences, &exp, threshold)
    })?;
    let mut out = Assessment { reports, ..Assessment::default() };
    for (t, task) in tasks.iter().enumerate() {
        match select_policy(&out.reports[t * bank.len()..(t + 1) * bank.len()]) {
            Some(r) => out.grouped.push((task.task_id.clone(), r.policy_id.clone())),
            None => out.incompatible.push(task.task_id.clone()),
        }
    }
    Ok(out)
}

/// The compatible report of smallest distance; the earliest wins ties.
pub fn select_policy(reports: &[CompatReport]) -> Option<&CompatReport> {
    reports.iter().filter(|r| r.compatible).fold(None, |best: Option<&CompatReport>, r| match best {
        Some(b) if b.distance <= r.distance => Some(b),
        _ => Some(r),
    })
}

/// Trains a policy per task and records its self-evaluation experience.
pub fn train_tasks(
    tasks: &[&TrafficTask],
    trainer: &dyn Trainer,
    cfg: &GroupingConfig,
    mode: ExecMode,
) -> Result<Vec<(Policy, usize)>> {
    par::try_map(mode, tasks, |task| {
        let id = policy_id_for(&task.task_id);
        let (mut p, steps) = trainer.train(task, &id, train_seed(cfg.master_seed, &task.task_id))?;
        let (exp, _) =
            evaluate_policy(&p, task, &cfg.sim, cfg.eval_steps, rollout_seed(cfg.master_seed, &task.task_id))?;
        p.experiences = vec![exp];
        Ok((p, steps))
    })
}

/// Called after every iteration (the bootstrap included) with the bank and
/// the tasks processed so far.
pub trait Observer {
    fn iteration(&mut self, bank: &PolicyBank, summary: &IterationSummary, processed: &[&TrafficTask]) -> Result<()>;
}

impl Observer for () {
    fn iteration(&mut self, _: &PolicyBank, _: &IterationSummary, _: &[&TrafficTask]) -> Result<()> {
        Ok(())
    }
}

/// A grouping run, optionally checkpointed to a directory.
pub struct GroupingRun<'a> {
    cfg: GroupingConfig,
    tasks: &'a [TrafficTask],
    scorer: Scorer,
    state: SamplerState,
    bank: PolicyBank,
    dir: Option<PathBuf>,
    history: Vec<IterationSummary>,
}

impl<'a> GroupingRun<'a> {
    pub fn new(tasks: &'a [TrafficTask], cfg: GroupingConfig) -> Result<Self> {
        cfg.validate()?;
        if tasks.is_empty() {
            return Err(Error::Input("no tasks to group".into()));
        }
        let mut ids: Vec<&str> = tasks.iter().map(|t| t.task_id.as_str()).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input("task ids must be unique".into()));
        }
        let mut order: Vec<String> = tasks.iter().map(|t| t.task_id.clone()).collect();
        order.shuffle(&mut seed::rng(seed::derive(cfg.master_seed, "order", "")));
        let state = SamplerState {
            schema: SCHEMA_VERSION,
            master_seed: cfg.master_seed,
            config_hash: cfg.hash(),
            order,
            cursor: 0,
        };
        Ok(GroupingRun {
            scorer: Scorer::new(cfg.scorer.clone())?,
            cfg,
            tasks,
            state,
            bank: PolicyBank::new(),
            dir: None,
            history: Vec::new(),
        })
    }

    /// Checkpoints and logs go to `dir`; any previous logs there are replaced.
    pub fn with_dir(mut self, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join("grouping_log.csv"), &format!("{GROUPING_LOG_HEADER}\n"))?;
        write_atomic(&dir.join("compat_log.csv"), &format!("{COMPAT_LOG_HEADER}\n"))?;
        write_atomic(&dir.join("merges.jsonl"), "")?;
        self.dir = Some(dir.to_path_buf());
        Ok(self)
    }

    /// Continues from the checkpoint in `dir`. Log rows from an iteration
    /// that did not finish checkpointing are dropped.
    pub fn resume(tasks: &'a [TrafficTask], cfg: GroupingConfig, dir: &Path) -> Result<Self> {
        let mut run = GroupingRun::new(tasks, cfg)?;
        let path = dir.join("rng.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let state: SamplerState = serde_json::from_str(&text)?;
        if state.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!("{} has schema {}", path.display(), state.schema)));
        }
        if state.config_hash != run.state.config_hash || state.order != run.state.order {
            return Err(Error::Config(format!(
                "checkpoint in {} was written by a different configuration or task set",
                dir.display()
            )));
        }
        run.bank = PolicyBank::load(dir)?;
        run.state = state;
        let done = run.bank.iteration;
        run.history = truncate_log(&dir.join("grouping_log.csv"), done)?
            .into_iter()
            .map(|row| parse_summary(&row))
            .collect::<Result<_>>()?;
        let mut processed = 0;
        for h in &mut run.history {
            processed += h.tasks_sampled;
            h.tasks_processed = processed;
        }
        truncate_log(&dir.join("compat_log.csv"), done)?;
        run.dir = Some(dir.to_path_buf());
        Ok(run)
    }

    pub fn bank(&self) -> &PolicyBank {
        &self.bank
    }

    pub fn into_bank(self) -> PolicyBank {
        self.bank
    }

    pub fn history(&self) -> &[IterationSummary] {
        &self.history
    }

    pub fn is_finished(&self) -> bool {
        self.state.cursor >= self.state.order.len()
    }

    pub fn processed_tasks(&self) -> Vec<&'a TrafficTask> {
        self.state.order[..self.state.cursor].iter().map(|id| self.task(id)).collect()
    }

    fn task(&self, id: &str) -> &'a TrafficTask {
        self.tasks.iter().find(|t| t.task_id == id).expect("ordered ids come from the task list")
    }

    /// Runs to completion.
    pub fn run(&mut self, trainer: &dyn Trainer, mode: ExecMode, observer: &mut dyn Observer) -> Result<()> {
        while !self.is_finished() {
            self.step(trainer, mode, observer)?;
        }
        Ok(())
    }

    /// Processes one iteration: the bootstrap when the bank is empty,
    /// otherwise assess, group, train, and cap.
    pub fn step(
        &mut self,
        trainer: &dyn Trainer,
        mode: ExecMode,
        observer: &mut dyn Observer,
    ) -> Result<IterationSummary> {
        let end = (self.state.cursor + self.cfg.k).min(self.state.order.len());
        let sampled: Vec<&TrafficTask> =
            self.state.order[self.state.cursor..end].iter().map(|id| self.task(id)).collect();
        let iteration = self.bank.iteration;

        // Nothing is compatible below -inf, so the scoring rollouts are skipped.
        let (to_train, grouped, reports) = if self.bank.is_empty() || self.cfg.threshold == f64::NEG_INFINITY {
            (sampled.clone(), Vec::new(), Vec::new())
        } else {
            let a = assess(&self.bank, &sampled, &self.scorer, self.cfg.threshold, &self.cfg, mode)?;
            let to_train = sampled.iter().copied().filter(|t| a.incompatible.contains(&t.task_id)).collect();
            (to_train, a.grouped, a.reports)
        };
        for (task_id, policy_id) in &grouped {
            self.bank.add_to_group(policy_id, task_id)?;
        }
        for (policy, steps) in train_tasks(&to_train, trainer, &self.cfg, mode)? {
            self.bank.w_steps += steps as u64;
            self.bank.insert(policy, Vec::new())?;
        }
        let merges_before = self.bank.merges.len();
        cap_bank(&mut self.bank, self.cfg.n, &self.cfg.distill, self.cfg.master_seed, mode)?;

        self.state.cursor = end;
        self.bank.iteration += 1;
        let summary = IterationSummary {
            iteration,
            tasks_sampled: sampled.len(),
            num_compatible: grouped.len(),
            num_trained: to_train.len(),
            bank_size: self.bank.len(),
            w_steps: self.bank.w_steps,
            tasks_processed: end,
        };
        if let Some(dir) = &self.dir {
            append_compat(dir, iteration, &reports)?;
            append_line(
                &dir.join("grouping_log.csv"),
                &format!(
                    "{},{},{},{},{},{}",
                    summary.iteration,
                    summary.tasks_sampled,
                    summary.num_compatible,
                    summary.num_trained,
                    summary.bank_size,
                    summary.w_steps
                ),
            )?;
            for m in &self.bank.merges[merges_before..] {
                append_line(&dir.join("merges.jsonl"), &serde_json::to_string(m)?)?;
            }
            self.bank.save(dir)?;
            write_atomic(&dir.join("rng.json"), &(serde_json::to_string_pretty(&self.state)? + "\n"))?;
        }
        self.history.push(summary.clone());
        observer.iteration(&self.bank, &summary, &self.processed_tasks())?;
        Ok(summary)
    }
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(path, e))
}

fn append_compat(dir: &Path, iteration: usize, reports: &[CompatReport]) -> Result<()> {
    let path = dir.join("compat_log.csv");
    let mut buf = Vec::new();
    for r in reports {
        r.write_row(iteration, &mut buf).map_err(|e| Error::io(&path, e))?;
    }
    let mut f = OpenOptions::new().append(true).create(true).open(&path).map_err(|e| Error::io(&path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(&path, e))
}

/// Keeps the header and rows whose leading iteration is below `keep_below`;
/// returns the kept data rows.
fn truncate_log(path: &Path, keep_below: usize) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let kept: Vec<String> = lines
        .filter(|l| l.split(',').next().and_then(|i| i.parse::<usize>().ok()).is_some_and(|i| i < keep_below))
        .map(str::to_string)
        .collect();
    let mut out = header + "\n";
    for l in &kept {
        out.push_str(l);
        out.push('\n');
    }
    write_atomic(path, &out)?;
    Ok(kept)
}

fn parse_summary(row: &str) -> Result<IterationSummary> {
    let f: Vec<&str> = row.split(',').collect();
    let num = |i: usize| -> Result<u64> {
        f.get(i).and_then(|v| v.parse().ok()).ok_or_else(|| Error::Input(format!("malformed grouping log row {row:?}")))
    };
    Ok(IterationSummary {
        iteration: num(0)? as usize,
        tasks_sampled: num(1)? as usize,
        num_compatible: num(2)? as usize,
        num_trained: num(3)? as usize,
        bank_size: num(4)? as usize,
        w_steps: num(5)?,
        tasks_processed: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_round_trip_through_json() {
        for t in [0.2, f64::INFINITY, f64::NEG_INFINITY, -1.0] {
            let cfg = GroupingConfig { threshold: t, ..GroupingConfig::default() };
            let back: GroupingConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
            assert_eq!(back.threshold, t);
        }
        assert!(parse_threshold("abc").is_err());
        assert_eq!(parse_threshold("-inf").unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = GroupingConfig::default();
        let b = GroupingConfig { n: 4, ..GroupingConfig::default() };
        assert_eq!(a.hash(), GroupingConfig::default().hash());
        assert_ne!(a.hash(), b.hash());
    }
}
