use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::seed;
use crate::{Error, Result, SCHEMA_VERSION};

/// Sinusoidal arrival-rate curve of one cell, UEs per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTraffic {
    pub base_rate: f64,
    pub amplitude: f64,
    pub phase_s: f64,
    pub period_s: f64,
}

impl CellTraffic {
    pub fn rate_at(&self, t: f64) -> f64 {
        let r = self.base_rate * (1.0 + self.amplitude * (2.0 * PI * (t + self.phase_s) / self.period_s).sin());
        r.max(0.0)
    }
}

/// One traffic scenario: the unit that gets grouped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficTask {
    pub task_id: String,
    /// Template the generator drew this task from, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archetype: Option<usize>,
    pub cells: Vec<CellTraffic>,
    pub mean_file_size_mb: f64,
    pub idle_dwell_mean_s: f64,
    pub p_depart_after_service: f64,
    pub seed: u64,
}

impl TrafficTask {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Input(format!("task {}: {msg}", self.task_id)));
        if self.cells.is_empty() {
            return bad("no cells".into());
        }
        for (i, c) in self.cells.iter().enumerate() {
            if !(c.base_rate > 0.0) {
                return bad(format!("cell {i} base_rate must be > 0"));
            }
            if !(0.0..1.0).contains(&c.amplitude) {
                return bad(format!("cell {i} amplitude must be in [0,1)"));
            }
            if !(c.period_s > 0.0) {
                return bad(format!("cell {i} period must be > 0"));
            }
            if !c.phase_s.is_finite() {
                return bad(format!("cell {i} phase must be finite"));
            }
        }
        self.check_common()
    }

    /// Looser check used by the simulator, which also accepts silent cells.
    pub(crate) fn check_runnable(&self, n_cells: usize) -> Result<()> {
        if self.cells.len() != n_cells {
            return Err(Error::Input(format!(
                "task {} has {} cells, simulator has {n_cells}",
                self.task_id,
                self.cells.len()
            )));
        }
        if self.cells.iter().any(|c| !(c.base_rate >= 0.0) || !(c.period_s > 0.0) || !c.amplitude.is_finite()) {
            return Err(Error::Input(format!("task {} has an invalid rate curve", self.task_id)));
        }
        self.check_common()
    }

    fn check_common(&self) -> Result<()> {
        if !(self.mean_file_size_mb > 0.0) || !(self.idle_dwell_mean_s > 0.0) {
            return Err(Error::Input(format!("task {}: file size and idle dwell must be > 0", self.task_id)));
        }
        if !(0.0..=1.0).contains(&self.p_depart_after_service) {
            return Err(Error::Input(format!("task {}: p_depart_after_service must be in [0,1]", self.task_id)));
        }
        Ok(())
    }
}

/// On-disk task file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSet {
    pub schema: u32,
    pub tasks: Vec<TrafficTask>,
}

pub fn write_task_file(path: &Path, tasks: &[TrafficTask]) -> Result<()> {
    let set = TaskSet { schema: SCHEMA_VERSION, tasks: tasks.to_vec() };
    let mut text = serde_json::to_string_pretty(&set)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_task_file(path: &Path) -> Result<Vec<TrafficTask>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Missing(path.to_path_buf()),
        _ => Error::io(path, e),
    })?;
    let set: TaskSet = serde_json::from_str(&text)?;
    if set.schema != SCHEMA_VERSION {
        return Err(Error::Schema(format!("{} has schema {}, expected {SCHEMA_VERSION}", path.display(), set.schema)));
    }
    let mut ids = std::collections::BTreeSet::new();
    for t in &set.tasks {
        t.validate()?;
        if !ids.insert(t.task_id.as_str()) {
            return Err(Error::Input(format!("duplicate task id {}", t.task_id)));
        }
    }
    Ok(set.tasks)
}

fn draw_archetype(n_cells: usize, rng: &mut impl Rng) -> TrafficTask {
    // Total sector load, split unevenly over the cells.
    let load = rng.gen_range(0.4..2.4);
    let weights: Vec<f64> = (0..n_cells).map(|_| rng.gen_range(0.2..1.0)).collect();
    let wsum: f64 = weights.iter().sum();
    let period = rng.gen_range(7200.0..28800.0);
    let cells = weights
        .iter()
        .map(|w| CellTraffic {
            base_rate: load * w / wsum,
            amplitude: rng.gen_range(0.0..0.8),
            phase_s: rng.gen_range(0.0..period),
            period_s: period,
        })
        .collect();
    TrafficTask {
        task_id: String::new(),
        archetype: None,
        cells,
        mean_file_size_mb: rng.gen_range(2.0..6.0),
        idle_dwell_mean_s: rng.gen_range(20.0..40.0),
        p_depart_after_service: rng.gen_range(0.6..0.8),
        seed: 0,
    }
}

/// Draws `n_archetypes` templates and derives `count` tasks from them in
/// round-robin order. Each task perturbs its template's rates by up to
/// `±jitter` (relative) and its phases by up to `±jitter` periods.
pub fn generate_tasks(
    count: usize,
    n_archetypes: usize,
    jitter: f64,
    n_cells: usize,
    master_seed: u64,
) -> Result<Vec<TrafficTask>> {
    if count < 1 {
        return Err(Error::Config("task count must be >= 1".into()));
    }
    if n_archetypes < 1 || n_archetypes > count {
        return Err(Error::Config(format!(
            "need 1 <= archetypes <= count, got {n_archetypes} archetypes for {count} tasks"
        )));
    }
    if !(0.0..1.0).contains(&jitter) {
        return Err(Error::Config("jitter must be in [0,1)".into()));
    }
    if n_cells < 2 {
        return Err(Error::Config("need at least two cells".into()));
    }
    let templates: Vec<TrafficTask> = (0..n_archetypes)
        .map(|a| draw_archetype(n_cells, &mut seed::rng(seed::derive_index(master_seed, "archetype", a as u64))))
        .collect();
    let width = count.saturating_sub(1).to_string().len().max(2);
    let tasks = (0..count)
        .map(|t| {
            let a = t % n_archetypes;
            let mut task = templates[a].clone();
            let mut rng = seed::rng(seed::derive_index(master_seed, "jitter", t as u64));
            if jitter > 0.0 {
                for c in &mut task.cells {
                    c.base_rate *= 1.0 + rng.gen_range(-jitter..=jitter);
                    c.phase_s += rng.gen_range(-jitter..=jitter) * c.period_s;
                }
            }
            task.task_id = format!("task-{t:0width$}");
            task.archetype = Some(a);
            task.seed = seed::derive_index(master_seed, "task", t as u64);
            task
        })
        .collect();
    Ok(tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic() {
        let a = generate_tasks(32, 8, 0.1, 4, 7).unwrap();
        let b = generate_tasks(32, 8, 0.1, 4, 7).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let c = generate_tasks(32, 8, 0.1, 4, 8).unwrap();
        assert_ne!(a, c);
        for t in &a {
            t.validate().unwrap();
        }
    }

    #[test]
    fn single_archetype_without_jitter_is_degenerate() {
        let tasks = generate_tasks(5, 1, 0.0, 4, 3).unwrap();
        for t in &tasks[1..] {
            assert_eq!(t.cells, tasks[0].cells);
            assert_eq!(t.mean_file_size_mb, tasks[0].mean_file_size_mb);
            assert_eq!(t.idle_dwell_mean_s, tasks[0].idle_dwell_mean_s);
            assert_eq!(t.p_depart_after_service, tasks[0].p_depart_after_service);
            assert_ne!(t.task_id, tasks[0].task_id);
            assert_ne!(t.seed, tasks[0].seed);
        }
    }

    #[test]
    fn round_robin_archetypes() {
        let tasks = generate_tasks(32, 8, 0.1, 4, 11).unwrap();
        let mut counts = [0usize; 8];
        for t in &tasks {
            counts[t.archetype.unwrap()] += 1;
        }
        assert_eq!(counts, [4; 8]);
    }

    #[test]
    fn generator_validation() {
        assert!(generate_tasks(0, 1, 0.1, 4, 0).is_err());
        assert!(generate_tasks(4, 5, 0.1, 4, 0).is_err());
        assert!(generate_tasks(4, 0, 0.1, 4, 0).is_err());
    }

    #[test]
    fn task_file_round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tasks.json");
        let tasks = generate_tasks(6, 2, 0.1, 4, 1).unwrap();
        write_task_file(&path, &tasks).unwrap();
        assert_eq!(read_task_file(&path).unwrap(), tasks);

        let text = std::fs::read_to_string(&path).unwrap().replace("\"schema\": 1", "\"schema\": 9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_task_file(&path), Err(Error::Schema(_))));
        assert!(matches!(read_task_file(&dir.path().join("nope.json")), Err(Error::Missing(_))));
    }
}
