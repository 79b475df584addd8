use super::{Experience, Policy};
use crate::netsim::{ActionParams, KpiSet, SimConfig, Simulator, StepOutcome, TrafficTask};
use crate::Result;

/// Anything that maps the latest state to the next action.
pub trait Controller {
    fn action(&mut self, state: &[f64]) -> Result<ActionParams>;
}

/// Deterministic-mode policy control.
impl Controller for &Policy {
    fn action(&mut self, state: &[f64]) -> Result<ActionParams> {
        ActionParams::from_flat(self.n_cells(), &self.deterministic_action(state)?)
    }
}

/// Constant parameters, e.g. the fixed-parameter baseline.
#[derive(Debug, Clone)]
pub struct FixedController(pub ActionParams);

impl Controller for FixedController {
    fn action(&mut self, _state: &[f64]) -> Result<ActionParams> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Rollout {
    pub states: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub kpis: Vec<KpiSet>,
    pub clamped_steps: usize,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Runs `steps` control steps on a fresh simulator. The controller first sees
/// an all-zero state.
pub fn rollout(
    controller: &mut impl Controller,
    task: &TrafficTask,
    sim_cfg: &SimConfig,
    steps: usize,
    seed: u64,
) -> Result<Rollout> {
    rollout_with(controller, task, sim_cfg, steps, seed, &mut |_| Ok(()))
}

/// [`rollout`], handing every step outcome to `on_step` as it happens.
pub fn rollout_with(
    controller: &mut impl Controller,
    task: &TrafficTask,
    sim_cfg: &SimConfig,
    steps: usize,
    seed: u64,
    on_step: &mut dyn FnMut(&StepOutcome) -> Result<()>,
) -> Result<Rollout> {
    let mut sim = Simulator::new(sim_cfg, task, seed)?;
    let mut state = vec![0.0; sim_cfg.state_dim()];
    let mut out = Rollout::default();
    for _ in 0..steps {
        let action = controller.action(&state)?;
        let step = sim.step(&action)?;
        on_step(&step)?;
        state = step.state.to_vec();
        out.clamped_steps += usize::from(step.clamped);
        out.rewards.push(step.reward);
        out.kpis.push(step.kpis);
        out.states.push(state.clone());
    }
    Ok(out)
}

/// One deterministic rollout of `policy` on `task`, returned as an
/// [`Experience`] plus its cumulative reward.
pub fn evaluate_policy(
    policy: &Policy,
    task: &TrafficTask,
    sim_cfg: &SimConfig,
    eval_steps: usize,
    seed: u64,
) -> Result<(Experience, f64)> {
    if eval_steps < 1 {
        return Err(crate::Error::Config("eval_steps must be >= 1".into()));
    }
    let r = rollout(&mut &*policy, task, sim_cfg, eval_steps, seed)?;
    let total = r.total_reward();
    Ok((
        Experience { task_id: task.task_id.clone(), policy_id: policy.policy_id.clone(), seed, states: r.states },
        total,
    ))
}
