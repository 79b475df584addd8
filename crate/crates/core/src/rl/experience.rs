use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// State trajectory of one deterministic evaluation rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub task_id: String,
    pub policy_id: String,
    pub seed: u64,
    /// One raw state vector (`3 * N_c` entries) per control step.
    pub states: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    schema: u32,
    task_id: String,
    policy_id: String,
    seed: u64,
}

impl Experience {
    /// Stable file stem: `<policy>__<task>__<seed hex>`.
    pub fn id(&self) -> String {
        format!("{}__{}__{:016x}", self.policy_id, self.task_id, self.seed)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.states.is_empty() || d == 0 {
            return Err(Error::Input(format!("experience {} is empty", self.id())));
        }
        if self.states.iter().any(|r| r.len() != d) {
            return Err(Error::Input(format!("experience {} has ragged rows", self.id())));
        }
        Ok(())
    }

    /// One state component over time.
    pub fn column(&self, d: usize) -> Vec<f64> {
        self.states.iter().map(|r| r[d]).collect()
    }

    /// Writes `<id>.csv` (`t,dim_0..`) and `<id>.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.validate()?;
        let id = self.id();
        let csv_path = dir.join(format!("{id}.csv"));
        let mut w = csv::Writer::from_path(&csv_path)?;
        let mut header = vec!["t".to_string()];
        header.extend((0..self.dim()).map(|d| format!("dim_{d}")));
        w.write_record(&header)?;
        for (t, row) in self.states.iter().enumerate() {
            let mut rec = vec![t.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        let sidecar = Sidecar {
            schema: crate::SCHEMA_VERSION,
            task_id: self.task_id.clone(),
            policy_id: self.policy_id.clone(),
            seed: self.seed,
        };
        let json_path = dir.join(format!("{id}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&json_path, e))
    }

    pub fn read(dir: &Path, id: &str) -> Result<Self> {
        let json_path = dir.join(format!("{id}.json"));
        let text = std::fs::read_to_string(&json_path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(json_path.clone()),
            _ => Error::io(&json_path, e),
        })?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        if sidecar.schema != crate::SCHEMA_VERSION {
            return Err(Error::Schema(format!("experience {id} has schema {}", sidecar.schema)));
        }
        let csv_path = dir.join(format!("{id}.csv"));
        if !csv_path.exists() {
            return Err(Error::Missing(csv_path));
        }
        let mut r = csv::Reader::from_path(&csv_path)?;
        let mut states = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Input(format!("{}: {e}", csv_path.display()))))
                .collect::<Result<Vec<_>>>()?;
            states.push(row);
        }
        let exp = Experience { task_id: sidecar.task_id, policy_id: sidecar.policy_id, seed: sidecar.seed, states };
        exp.validate()?;
        Ok(exp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let e = Experience {
            task_id: "task-03".into(),
            policy_id: "pol-a".into(),
            seed: 42,
            states: vec![vec![0.1, 1.0 / 3.0, 7.25e-9], vec![2.0, 0.0, 1e300]],
        };
        e.write(dir.path()).unwrap();
        let back = Experience::read(dir.path(), &e.id()).unwrap();
        assert_eq!(back, e);
        let header = std::fs::read_to_string(dir.path().join(format!("{}.csv", e.id()))).unwrap();
        assert!(header.starts_with("t,dim_0,dim_1,dim_2\n"));
    }

    #[test]
    fn rejects_ragged_and_empty() {
        let mut e = Experience { task_id: "t".into(), policy_id: "p".into(), seed: 0, states: vec![] };
        assert!(e.validate().is_err());
        e.states = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(e.validate().is_err());
    }
}
