//! Bank performance (rho), training efficiency (xi), and the two
//! non-learning baselines.

use serde::{Deserialize, Serialize};

use crate::bank::PolicyBank;
use crate::netsim::{ActionParams, SimConfig, TrafficTask, ALPHA_RANGE};
use crate::par::{self, ExecMode};
use crate::rl::{evaluate_policy, rollout, Controller, FixedController, Rollout};
use crate::{seed, Error, Result};

/// Environment steps per unit of `w`.
pub const W_UNIT_STEPS: f64 = 100_000.0;

pub const FP_ALPHA_DB: f64 = 2.0;
pub const FP_BETA_DBM: f64 = -100.0;
pub const FP_LAMBDA_DBM: f64 = -96.0;
pub const AR_KAPPA: f64 = 6.0;

/// Cumulative reward of one policy on one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairReward {
    pub policy_id: String,
    pub task_id: String,
    pub reward: f64,
}

/// One evaluated run of a method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub method: String,
    pub seed: u64,
    pub n: Option<usize>,
    pub threshold: Option<f64>,
    pub rho: f64,
    pub w_steps: Option<u64>,
    pub xi: Option<f64>,
    pub num_trained: Option<usize>,
    pub per_task: Vec<PairReward>,
}

impl EvalResult {
    pub fn w_units(&self) -> Option<f64> {
        self.w_steps.map(|w| w as f64 / W_UNIT_STEPS)
    }
}

/// Seed for ρ evaluation rollouts; distinct from training and experience
/// seeds.
pub fn rho_seed(master: u64, task_id: &str) -> u64 {
    seed::derive(master, "rho", task_id)
}

pub fn mean_reward(per_task: &[PairReward]) -> Result<f64> {
    if per_task.is_empty() {
        return Err(Error::Input("no (policy, task) evaluations to average".into()));
    }
    Ok(per_task.iter().map(|p| p.reward).sum::<f64>() / per_task.len() as f64)
}

/// Evaluates every policy on its training and grouped tasks; ρ is the mean
/// cumulative reward over those pairs.
pub fn compute_rho(
    bank: &PolicyBank,
    tasks: &[TrafficTask],
    sim: &SimConfig,
    eval_steps: usize,
    master_seed: u64,
    mode: ExecMode,
) -> Result<(f64, Vec<PairReward>)> {
    if bank.is_empty() {
        return Err(Error::Input("cannot compute rho of an empty bank".into()));
    }
    let pairs = bank.coverage();
    let per_task = par::try_map(mode, &pairs, |(pid, tid)| {
        let policy = bank.get(pid).expect("coverage lists banked policies");
        let task = tasks
            .iter()
            .find(|t| &t.task_id == tid)
            .ok_or_else(|| Error::Input(format!("task {tid} is not in the task set")))?;
        let (_, reward) = evaluate_policy(policy, task, sim, eval_steps, rho_seed(master_seed, tid))?;
        Ok::<_, Error>(PairReward { policy_id: pid.clone(), task_id: tid.clone(), reward })
    })?;
    Ok((mean_reward(&per_task)?, per_task))
}

/// `rho / (w_steps / 100 000)`.
pub fn compute_xi(rho: f64, w_steps: u64) -> Result<f64> {
    if w_steps == 0 {
        return Err(Error::Input("xi is undefined without training steps".into()));
    }
    Ok(rho / (w_steps as f64 / W_UNIT_STEPS))
}

pub fn fp_action(n_cells: usize) -> ActionParams {
    ActionParams::uniform(n_cells, FP_ALPHA_DB, FP_BETA_DBM, FP_LAMBDA_DBM)
}

/// Load-proportional handover offsets: `alpha_ij = clamp(kappa (u_j - u_i))`
/// on the utilisations of the last state, so a loaded cell hands UEs off
/// more readily. Reselection thresholds stay at the FP values.
#[derive(Debug, Clone)]
pub struct AdaptiveRule {
    pub n_cells: usize,
    pub kappa: f64,
}

impl AdaptiveRule {
    pub fn action_for(&self, utilization: &[f64]) -> ActionParams {
        let mut a = fp_action(self.n_cells);
        for i in 0..self.n_cells {
            for j in 0..self.n_cells {
                if i != j {
                    let v = (self.kappa * (utilization[j] - utilization[i])).clamp(ALPHA_RANGE.0, ALPHA_RANGE.1);
                    a.set_alpha(i, j, v);
                }
            }
        }
        a
    }
}

impl Controller for AdaptiveRule {
    fn action(&mut self, state: &[f64]) -> Result<ActionParams> {
        let n = self.n_cells;
        if state.len() != 3 * n {
            return Err(Error::Input(format!("state has {} entries, expected {}", state.len(), 3 * n)));
        }
        Ok(self.action_for(&state[n..2 * n]))
    }
}

pub fn fp_rollout(task: &TrafficTask, sim: &SimConfig, eval_steps: usize, seed: u64) -> Result<Rollout> {
    rollout(&mut FixedController(fp_action(sim.n_cells)), task, sim, eval_steps, seed)
}

pub fn ar_rollout(task: &TrafficTask, sim: &SimConfig, eval_steps: usize, seed: u64) -> Result<Rollout> {
    let mut ctrl = AdaptiveRule { n_cells: sim.n_cells, kappa: AR_KAPPA };
    rollout(&mut ctrl, task, sim, eval_steps, seed)
}

/// Cumulative reward of the fixed-parameter baseline.
pub fn fp_baseline(task: &TrafficTask, sim: &SimConfig, eval_steps: usize, seed: u64) -> Result<f64> {
    Ok(fp_rollout(task, sim, eval_steps, seed)?.total_reward())
}

/// Cumulative reward of the adaptive-rule baseline.
pub fn ar_baseline(task: &TrafficTask, sim: &SimConfig, eval_steps: usize, seed: u64) -> Result<f64> {
    Ok(ar_rollout(task, sim, eval_steps, seed)?.total_reward())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xi_examples() {
        assert_eq!(compute_xi(10.0, 200_000).unwrap(), 5.0);
        assert_eq!(compute_xi(7.5, 300_000).unwrap(), 2.5);
        assert_eq!(compute_xi(10.0, 400_000).unwrap(), 2.5);
        assert!(compute_xi(1.0, 0).is_err());
    }

    #[test]
    fn rho_is_a_mean() {
        let p = |r| PairReward { policy_id: "p".into(), task_id: "t".into(), reward: r };
        assert_eq!(mean_reward(&[p(4.0), p(6.0)]).unwrap(), 5.0);
        assert_eq!(mean_reward(&[p(3.5)]).unwrap(), 3.5);
        assert!(mean_reward(&[]).is_err());
    }

    #[test]
    fn adaptive_rule_offsets() {
        let ar = AdaptiveRule { n_cells: 2, kappa: AR_KAPPA };
        let a = ar.action_for(&[0.4, 0.4]);
        assert_eq!((a.alpha(0, 1), a.alpha(1, 0)), (0.0, 0.0));
        let a = ar.action_for(&[1.0, 0.0]);
        assert_eq!((a.alpha(0, 1), a.alpha(1, 0)), (-6.0, 6.0));
        assert_eq!(a.beta, vec![FP_BETA_DBM; 2]);
        assert_eq!(a.lambda, vec![FP_LAMBDA_DBM; 2]);
    }
}
