//! The policy bank and its on-disk checkpoint form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::MergeRecord;
use crate::rl::{Experience, Policy, PolicyFile};
use crate::{Error, Result, SCHEMA_VERSION};

/// Policies, the tasks grouped under each, and training accounting.
#[derive(Debug, Clone, Default)]
pub struct PolicyBank {
    pub policies: Vec<Policy>,
    /// Tasks grouped under each policy, excluding the tasks it was trained on
    /// (those live in the policy's provenance).
    pub groups: BTreeMap<String, Vec<String>>,
    pub w_steps: u64,
    pub iteration: usize,
    pub merges: Vec<MergeRecord>,
    merged_count: usize,
}

impl PolicyBank {
    pub fn new() -> Self {
        PolicyBank::default()
    }

    pub fn len(&self) -> usize {
        self.policies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policies.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Policy> {
        self.policies.iter().find(|p| p.policy_id == id)
    }

    pub fn group(&self, id: &str) -> &[String] {
        self.groups.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Id for the next distilled policy.
    pub fn next_merged_id(&mut self) -> String {
        self.merged_count += 1;
        format!("merged-{:03}", self.merged_count)
    }

    pub fn insert(&mut self, policy: Policy, grouped: Vec<String>) -> Result<()> {
        if self.get(&policy.policy_id).is_some() {
            return Err(Error::Input(format!("policy {} is already in the bank", policy.policy_id)));
        }
        if policy.experiences.is_empty() {
            return Err(Error::Input(format!("policy {} has no training experience", policy.policy_id)));
        }
        self.groups.insert(policy.policy_id.clone(), grouped);
        self.policies.push(policy);
        Ok(())
    }

    pub fn remove(&mut self, id: &str) -> Result<(Policy, Vec<String>)> {
        let idx = self
            .policies
            .iter()
            .position(|p| p.policy_id == id)
            .ok_or_else(|| Error::Input(format!("policy {id} is not in the bank")))?;
        let p = self.policies.remove(idx);
        let g = self.groups.remove(id).unwrap_or_default();
        Ok((p, g))
    }

    pub fn add_to_group(&mut self, id: &str, task_id: &str) -> Result<()> {
        let g = self.groups.get_mut(id).ok_or_else(|| Error::Input(format!("policy {id} is not in the bank")))?;
        g.push(task_id.to_string());
        Ok(())
    }

    /// Every `(policy_id, task_id)` the bank is responsible for: training
    /// tasks first, then grouped tasks.
    pub fn coverage(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for p in &self.policies {
            for t in p.provenance.trained_task_ids.iter().chain(self.group(&p.policy_id)) {
                out.push((p.policy_id.clone(), t.clone()));
            }
        }
        out
    }

    /// Sorted task ids across all policies, duplicates kept.
    pub fn task_multiset(&self) -> Vec<String> {
        let mut v: Vec<String> = self.coverage().into_iter().map(|(_, t)| t).collect();
        v.sort();
        v
    }

    pub fn num_trained(&self) -> usize {
        self.policies.iter().map(|p| p.provenance.trained_task_ids.len()).sum()
    }

    /// Writes `bank.json` and the experience files under `experiences/`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let exp_dir = dir.join("experiences");
        fs::create_dir_all(&exp_dir).map_err(|e| Error::io(&exp_dir, e))?;
        for p in &self.policies {
            for e in &p.experiences {
                if !exp_dir.join(format!("{}.json", e.id())).exists() {
                    e.write(&exp_dir)?;
                }
            }
        }
        let file = BankFile {
            schema: SCHEMA_VERSION,
            policies: self.policies.iter().map(Policy::to_file).collect(),
            groups: self.groups.clone(),
            w_steps: self.w_steps,
            iteration: self.iteration,
            merges: self.merges.clone(),
            merged_count: self.merged_count,
        };
        write_atomic(&dir.join("bank.json"), &(serde_json::to_string(&file)? + "\n"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("bank.json");
        let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(path.clone()),
            _ => Error::io(&path, e),
        })?;
        let file: BankFile = serde_json::from_str(&text)?;
        if file.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!("{} has schema {}", path.display(), file.schema)));
        }
        let exp_dir = dir.join("experiences");
        let mut policies = Vec::with_capacity(file.policies.len());
        for pf in file.policies {
            let exps = pf.experience_ids.iter().map(|id| Experience::read(&exp_dir, id)).collect::<Result<Vec<_>>>()?;
            policies.push(Policy::from_file(pf, exps)?);
        }
        Ok(PolicyBank {
            policies,
            groups: file.groups,
            w_steps: file.w_steps,
            iteration: file.iteration,
            merges: file.merges,
            merged_count: file.merged_count,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankFile {
    schema: u32,
    policies: Vec<PolicyFile>,
    groups: BTreeMap<String, Vec<String>>,
    w_steps: u64,
    iteration: usize,
    merges: Vec<MergeRecord>,
    merged_count: usize,
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
