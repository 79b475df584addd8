use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{evaluate_policy, gae, Activations, Adam, Mlp, Policy, RunningNorm};
use crate::netsim::{ActionBounds, ActionParams, SimConfig, Simulator, TrafficTask};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_epsilon: f64,
    pub learning_rate: f64,
    pub epochs_per_update: usize,
    pub minibatch_size: usize,
    pub steps_per_update: usize,
    pub total_env_steps: usize,
    pub entropy_coef: f64,
    /// Global gradient-norm cap per network; `inf` disables it.
    pub max_grad_norm: f64,
    pub hidden: usize,
    pub init_log_std: f64,
    /// Scale rewards by the running std of the discounted return.
    pub normalize_rewards: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_epsilon: 0.2,
            learning_rate: 3e-4,
            epochs_per_update: 10,
            minibatch_size: 64,
            steps_per_update: 2000,
            total_env_steps: 200_000,
            entropy_coef: 0.0,
            max_grad_norm: 0.5,
            hidden: 64,
            init_log_std: -0.5,
            normalize_rewards: true,
        }
    }
}

impl PpoConfig {
    /// Short-budget variant used for CI and desk-scale experiments. With a
    /// tenth of the interaction budget it takes more, larger steps.
    pub fn desk_scale() -> Self {
        PpoConfig { total_env_steps: 20_000, steps_per_update: 1000, learning_rate: 1e-2, ..PpoConfig::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v <= 1.0;
        if !unit(self.gamma) || !unit(self.gae_lambda) {
            return Err(Error::Config("gamma and gae_lambda must be in (0,1]".into()));
        }
        if !(self.clip_epsilon > 0.0) || !(self.learning_rate > 0.0) {
            return Err(Error::Config("clip_epsilon and learning_rate must be > 0".into()));
        }
        if self.steps_per_update == 0 || self.minibatch_size == 0 || self.epochs_per_update == 0 {
            return Err(Error::Config("batch sizes and epochs must be >= 1".into()));
        }
        if self.total_env_steps == 0 || self.total_env_steps % self.steps_per_update != 0 {
            return Err(Error::Config(format!(
                "total_env_steps {} must be a positive multiple of steps_per_update {}",
                self.total_env_steps, self.steps_per_update
            )));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        Ok(())
    }
}

/// On-policy transitions ready for an update. Observations are already
/// normalised with the statistics in force when they were collected.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub obs: Vec<Vec<f64>>,
    pub pre_squash: Vec<Vec<f64>>,
    pub old_logp: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    fn normalized_advantages(&self, idx: &[usize]) -> Vec<f64> {
        let m = idx.len() as f64;
        let mean = idx.iter().map(|&i| self.advantages[i]).sum::<f64>() / m;
        let var = idx.iter().map(|&i| (self.advantages[i] - mean).powi(2)).sum::<f64>() / m;
        let sd = var.sqrt() + 1e-8;
        idx.iter().map(|&i| (self.advantages[i] - mean) / sd).collect()
    }
}

/// Adam states for the three parameter groups.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub actor: Adam,
    pub log_std: Adam,
    pub critic: Adam,
}

impl Optimizers {
    pub fn new(policy: &Policy, lr: f64) -> Self {
        Optimizers {
            actor: Adam::new(policy.actor.n_params(), lr),
            log_std: Adam::new(policy.log_std.len(), lr),
            critic: Adam::new(policy.critic.n_params(), lr),
        }
    }
}

/// Clipped-surrogate loss (to minimise) over the minibatch `idx`, with the
/// entropy bonus subtracted. Advantages are standardised within `idx`.
/// When `grads` is given, `d loss` w.r.t. actor parameters and `log_std` is
/// accumulated into it.
pub fn policy_loss(
    actor: &Mlp,
    log_std: &[f64],
    batch: &Batch,
    idx: &[usize],
    clip: f64,
    entropy_coef: f64,
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let m = idx.len() as f64;
    let adv = batch.normalized_advantages(idx);
    let inv_var: Vec<f64> = log_std.iter().map(|ls| (-2.0 * ls).exp()).collect();
    let mut acts = Activations::default();
    let mut dmean = vec![0.0; log_std.len()];
    let mut loss = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        actor.forward_into(&batch.obs[i], &mut acts);
        let mean = acts.output();
        let u = &batch.pre_squash[i];
        let logp = super::gaussian_log_prob(u, mean, log_std);
        let ratio = (logp - batch.old_logp[i]).exp();
        let a = adv[k];
        let unclipped = ratio * a;
        let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * a;
        loss -= unclipped.min(clipped) / m;
        if let Some((ga, gs)) = grads.as_mut() {
            if unclipped <= clipped {
                let coef = -a * ratio / m;
                for d in 0..dmean.len() {
                    let diff = u[d] - mean[d];
                    dmean[d] = coef * diff * inv_var[d];
                    gs[d] += coef * (diff * diff * inv_var[d] - 1.0);
                }
                actor.backward(&acts, &dmean, ga);
            }
        }
    }
    if entropy_coef != 0.0 {
        let entropy: f64 = log_std.iter().map(|ls| ls + 0.5 * (1.0 + super::policy::LN_2PI)).sum();
        loss -= entropy_coef * entropy;
        if let Some((_, gs)) = grads.as_mut() {
            for g in gs.iter_mut() {
                *g -= entropy_coef;
            }
        }
    }
    loss
}

/// Vanilla policy-gradient surrogate `-mean(A * log pi(u|s))`, standardised
/// advantages as in [`policy_loss`].
pub fn pg_loss(
    actor: &Mlp,
    log_std: &[f64],
    batch: &Batch,
    idx: &[usize],
    mut grads: Option<(&mut [f64], &mut [f64])>,
) -> f64 {
    let m = idx.len() as f64;
    let adv = batch.normalized_advantages(idx);
    let mut acts = Activations::default();
    let mut loss = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        actor.forward_into(&batch.obs[i], &mut acts);
        let mean = acts.output();
        let u = &batch.pre_squash[i];
        loss -= adv[k] * super::gaussian_log_prob(u, mean, log_std) / m;
        if let Some((ga, gs)) = grads.as_mut() {
            let dmean: Vec<f64> = (0..log_std.len())
                .map(|d| {
                    let sd2 = (2.0 * log_std[d]).exp();
                    let diff = u[d] - mean[d];
                    gs[d] -= adv[k] / m * (diff * diff / sd2 - 1.0);
                    -adv[k] / m * diff / sd2
                })
                .collect();
            actor.backward(&acts, &dmean, ga);
        }
    }
    loss
}

/// `0.5 * mean((V(s) - R)^2)` over `idx`.
pub fn value_loss(critic: &Mlp, batch: &Batch, idx: &[usize], mut grad: Option<&mut [f64]>) -> f64 {
    let m = idx.len() as f64;
    let mut acts = Activations::default();
    let mut loss = 0.0;
    for &i in idx {
        critic.forward_into(&batch.obs[i], &mut acts);
        let err = acts.output()[0] - batch.returns[i];
        loss += 0.5 * err * err / m;
        if let Some(g) = grad.as_mut() {
            critic.backward(&acts, &[err / m], g);
        }
    }
    loss
}

fn clip_grad_norm(groups: &mut [&mut [f64]], max_norm: f64) {
    if !max_norm.is_finite() {
        return;
    }
    let norm = groups.iter().flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / (norm + 1e-12);
        for g in groups.iter_mut() {
            g.iter_mut().for_each(|v| *v *= s);
        }
    }
}

fn ensure_finite(policy: &Policy, loss: f64, what: &str) -> Result<()> {
    if !loss.is_finite() || !policy.is_finite() {
        return Err(Error::Diverged(format!("policy {}: non-finite {what} (loss = {loss})", policy.policy_id)));
    }
    Ok(())
}

/// Loss statistics of one update.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
}

/// `epochs_per_update` passes of shuffled minibatch steps on both networks.
pub fn ppo_update(
    policy: &mut Policy,
    batch: &Batch,
    cfg: &PpoConfig,
    opt: &mut Optimizers,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut stats = UpdateStats::default();
    let mut g_actor = vec![0.0; policy.actor.n_params()];
    let mut g_std = vec![0.0; policy.log_std.len()];
    let mut g_critic = vec![0.0; policy.critic.n_params()];
    for _ in 0..cfg.epochs_per_update {
        order.shuffle(rng);
        for idx in order.chunks(cfg.minibatch_size) {
            g_actor.iter_mut().for_each(|g| *g = 0.0);
            g_std.iter_mut().for_each(|g| *g = 0.0);
            let pl = policy_loss(
                &policy.actor,
                &policy.log_std,
                batch,
                idx,
                cfg.clip_epsilon,
                cfg.entropy_coef,
                Some((&mut g_actor, &mut g_std)),
            );
            clip_grad_norm(&mut [&mut g_actor, &mut g_std], cfg.max_grad_norm);
            opt.actor.step(&mut policy.actor.params, &g_actor);
            opt.log_std.step(&mut policy.log_std, &g_std);
            policy.clamp_log_std();

            g_critic.iter_mut().for_each(|g| *g = 0.0);
            let vl = value_loss(&policy.critic, batch, idx, Some(&mut g_critic));
            clip_grad_norm(&mut [&mut g_critic], cfg.max_grad_norm);
            opt.critic.step(&mut policy.critic.params, &g_critic);

            ensure_finite(policy, pl + vl, "PPO loss")?;
            stats = UpdateStats { policy_loss: pl, value_loss: vl };
        }
    }
    Ok(stats)
}

/// A single full-batch policy-gradient step on the actor.
pub fn vanilla_pg_update(policy: &mut Policy, batch: &Batch, cfg: &PpoConfig, opt: &mut Optimizers) -> Result<f64> {
    let idx: Vec<usize> = (0..batch.len()).collect();
    let mut g_actor = vec![0.0; policy.actor.n_params()];
    let mut g_std = vec![0.0; policy.log_std.len()];
    let loss = pg_loss(&policy.actor, &policy.log_std, batch, &idx, Some((&mut g_actor, &mut g_std)));
    clip_grad_norm(&mut [&mut g_actor, &mut g_std], cfg.max_grad_norm);
    opt.actor.step(&mut policy.actor.params, &g_actor);
    opt.log_std.step(&mut policy.log_std, &g_std);
    policy.clamp_log_std();
    ensure_finite(policy, loss, "policy-gradient loss")?;
    Ok(loss)
}

/// Scales rewards by the running standard deviation of the discounted return.
struct RewardScaler {
    gamma: f64,
    ret: f64,
    stats: RunningNorm,
}

impl RewardScaler {
    fn new(gamma: f64) -> Self {
        RewardScaler { gamma, ret: 0.0, stats: RunningNorm::new(1) }
    }

    fn scale(&mut self, r: f64) -> f64 {
        self.ret = self.gamma * self.ret + r;
        self.stats.update(&[self.ret]);
        r / (self.stats.variance(0) + 1e-8).sqrt()
    }

    fn reset(&mut self) {
        self.ret = 0.0;
    }
}

/// Trains a fresh policy on `task` with PPO for exactly
/// `cfg.total_env_steps` environment steps. Episodes run for
/// `sim_cfg.episode_steps` and are treated as truncated (value-bootstrapped)
/// at their end. Returns the policy and the env-step count.
///
/// The policy's `final_eval_reward` is set from a deterministic rollout of one
/// episode with a seed derived from `seed`.
pub fn train_policy(
    task: &TrafficTask,
    sim_cfg: &SimConfig,
    cfg: &PpoConfig,
    seed: u64,
    policy_id: &str,
) -> Result<(Policy, usize)> {
    cfg.validate()?;
    sim_cfg.validate()?;
    let mut rng = seed::rng(seed::derive(seed, "ppo", &task.task_id));
    let bounds = ActionBounds::for_cells(sim_cfg.n_cells);
    let mut policy = Policy::new(policy_id, sim_cfg.state_dim(), bounds, cfg.hidden, cfg.init_log_std, &mut rng);
    policy.provenance.trained_task_ids.push(task.task_id.clone());
    let mut opt = Optimizers::new(&policy, cfg.learning_rate);
    let mut scaler = RewardScaler::new(cfg.gamma);

    let n_updates = cfg.total_env_steps / cfg.steps_per_update;
    let mut episode = 0u64;
    let mut sim = Simulator::new(sim_cfg, task, seed::derive_index(seed, "episode", episode))?;
    let mut raw = vec![0.0; sim_cfg.state_dim()];
    let mut env_steps = 0;
    let n = cfg.steps_per_update;

    for _ in 0..n_updates {
        let mut batch = Batch::default();
        let mut rewards = Vec::with_capacity(n);
        let mut values = Vec::with_capacity(n);
        let mut next_values = vec![0.0; n];
        let mut ends = vec![false; n];
        for t in 0..n {
            policy.obs_norm.update(&raw);
            let obs = policy.obs_norm.normalize(&raw);
            let mean = policy.actor.forward(&obs);
            let u: Vec<f64> = mean
                .iter()
                .zip(&policy.log_std)
                .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let logp = super::gaussian_log_prob(&u, &mean, &policy.log_std);
            let action = ActionParams::from_flat(sim_cfg.n_cells, &policy.bounds.squash(&u))?;
            values.push(policy.value(&obs));
            let out = sim.step(&action)?;
            env_steps += 1;
            rewards.push(if cfg.normalize_rewards { scaler.scale(out.reward) } else { out.reward });
            batch.obs.push(obs);
            batch.pre_squash.push(u);
            batch.old_logp.push(logp);
            raw = out.state.to_vec();
            if sim.done() {
                ends[t] = true;
                next_values[t] = policy.value(&policy.obs_norm.normalize(&raw));
                episode += 1;
                sim = Simulator::new(sim_cfg, task, seed::derive_index(seed, "episode", episode))?;
                raw = vec![0.0; sim_cfg.state_dim()];
                scaler.reset();
            }
        }
        for t in 0..n {
            if !ends[t] {
                next_values[t] = if t + 1 < n { values[t + 1] } else { policy.value(&policy.obs_norm.normalize(&raw)) };
            }
        }
        ends[n - 1] = true;
        let (adv, ret) = gae(&rewards, &values, &next_values, &ends, cfg.gamma, cfg.gae_lambda);
        batch.advantages = adv;
        batch.returns = ret;
        ppo_update(&mut policy, &batch, cfg, &mut opt, &mut rng)?;
    }

    let eval_seed = seed::derive(seed, "final-eval", &task.task_id);
    let (_, reward) = evaluate_policy(&policy, task, sim_cfg, sim_cfg.episode_steps, eval_seed)?;
    policy.final_eval_reward = Some(reward);
    Ok((policy, env_steps))
}

/// Seed under which [`train_policy`] records `final_eval_reward`.
pub fn final_eval_seed(seed: u64, task: &TrafficTask) -> u64 {
    seed::derive(seed, "final-eval", &task.task_id)
}
