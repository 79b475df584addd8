use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Experience, Mlp, RunningNorm};
use crate::netsim::{ActionBounds, ActionParams};
use crate::{Error, Result, SCHEMA_VERSION};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActMode {
    Stochastic,
    Deterministic,
}

/// Where a policy came from: the tasks it was trained on (directly or via
/// its merged parents) and the policies it was distilled from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trained_task_ids: Vec<String>,
    pub parent_ids: Vec<String>,
}

/// Diagonal-Gaussian log density of `u`.
pub fn gaussian_log_prob(u: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    u.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

/// Tanh-squashed Gaussian controller with a separate value network.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub policy_id: String,
    pub actor: Mlp,
    /// State-independent, clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
    pub log_std: Vec<f64>,
    pub critic: Mlp,
    pub obs_norm: RunningNorm,
    pub bounds: ActionBounds,
    pub provenance: Provenance,
    /// Training interaction experiences, inherited through merges.
    pub experiences: Vec<Experience>,
    /// Deterministic evaluation reward recorded right after training.
    pub final_eval_reward: Option<f64>,
}

impl Policy {
    pub fn new(
        policy_id: impl Into<String>,
        obs_dim: usize,
        bounds: ActionBounds,
        hidden: usize,
        init_log_std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let act_dim = bounds.dim();
        Policy {
            policy_id: policy_id.into(),
            actor: Mlp::init(&[obs_dim, hidden, hidden, act_dim], 0.01, rng),
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); act_dim],
            critic: Mlp::init(&[obs_dim, hidden, hidden, 1], 1.0, rng),
            obs_norm: RunningNorm::new(obs_dim),
            bounds,
            provenance: Provenance::default(),
            experiences: Vec::new(),
            final_eval_reward: None,
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.actor.output_dim()
    }

    pub fn n_cells(&self) -> usize {
        self.obs_dim() / 3
    }

    pub fn check_state(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.obs_dim() {
            return Err(Error::Input(format!("state has {} entries, policy expects {}", s.len(), self.obs_dim())));
        }
        if s.iter().any(|v| v.is_nan()) {
            return Err(Error::Input("state contains NaN".into()));
        }
        Ok(())
    }

    pub fn normalized(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_state(s)?;
        Ok(self.obs_norm.normalize(s))
    }

    /// Pre-squash Gaussian mean for a raw state.
    pub fn mean(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.actor.forward(&self.normalized(s)?))
    }

    /// The squashed mean, i.e. the deterministic action, as a flat vector.
    pub fn deterministic_action(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self.bounds.squash(&self.mean(s)?))
    }

    /// Samples pre-squash `u`, returns `(u, squashed action, log p(u))`.
    pub fn sample(&self, s: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>, f64)> {
        let mean = self.mean(s)?;
        let u: Vec<f64> = mean
            .iter()
            .zip(&self.log_std)
            .map(|(m, ls)| {
                let z: f64 = StandardNormal.sample(rng);
                m + ls.exp() * z
            })
            .collect();
        let logp = gaussian_log_prob(&u, &mean, &self.log_std);
        let a = self.bounds.squash(&u);
        Ok((u, a, logp))
    }

    pub fn act(&self, s: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<ActionParams> {
        let flat = match mode {
            ActMode::Deterministic => self.deterministic_action(s)?,
            ActMode::Stochastic => self.sample(s, rng)?.1,
        };
        ActionParams::from_flat(self.n_cells(), &flat)
    }

    /// Value estimate for an already-normalised state.
    pub fn value(&self, s_norm: &[f64]) -> f64 {
        self.critic.forward(s_norm)[0]
    }

    pub fn clamp_log_std(&mut self) {
        for ls in &mut self.log_std {
            *ls = ls.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.actor.params.iter().all(|p| p.is_finite())
            && self.critic.params.iter().all(|p| p.is_finite())
            && self.log_std.iter().all(|p| p.is_finite())
    }

    /// All raw states from the training experiences, in order.
    pub fn experience_states(&self) -> Vec<&[f64]> {
        self.experiences.iter().flat_map(|e| e.states.iter().map(|r| r.as_slice())).collect()
    }

    pub fn to_file(&self) -> PolicyFile {
        PolicyFile {
            schema: SCHEMA_VERSION,
            policy_id: self.policy_id.clone(),
            actor: LayerWeights::from_mlp(&self.actor),
            log_std: self.log_std.clone(),
            critic: LayerWeights::from_mlp(&self.critic),
            obs_norm: self.obs_norm.clone(),
            bounds: self.bounds.clone(),
            provenance: self.provenance.clone(),
            experience_ids: self.experiences.iter().map(Experience::id).collect(),
            final_eval_reward: self.final_eval_reward,
        }
    }

    /// Rebuilds a policy; `experiences` must match `file.experience_ids`.
    pub fn from_file(file: PolicyFile, experiences: Vec<Experience>) -> Result<Self> {
        if file.schema != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "policy {} has schema {}, expected {SCHEMA_VERSION}",
                file.policy_id, file.schema
            )));
        }
        let ids: Vec<String> = experiences.iter().map(Experience::id).collect();
        if ids != file.experience_ids {
            return Err(Error::Input(format!(
                "policy {}: experience list does not match its references",
                file.policy_id
            )));
        }
        let policy = Policy {
            policy_id: file.policy_id,
            actor: LayerWeights::to_mlp(&file.actor)?,
            log_std: file.log_std,
            critic: LayerWeights::to_mlp(&file.critic)?,
            obs_norm: file.obs_norm,
            bounds: file.bounds,
            provenance: file.provenance,
            experiences,
            final_eval_reward: file.final_eval_reward,
        };
        if policy.log_std.len() != policy.act_dim()
            || policy.bounds.dim() != policy.act_dim()
            || policy.obs_norm.dim() != policy.obs_dim()
            || policy.critic.input_dim() != policy.obs_dim()
        {
            return Err(Error::Input(format!("policy {}: inconsistent dimensions", policy.policy_id)));
        }
        if !policy.is_finite() {
            return Err(Error::Input(format!("policy {}: non-finite weights", policy.policy_id)));
        }
        Ok(policy)
    }
}

/// One dense layer as nested arrays (`weights[out][in]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LayerWeights {
    fn from_mlp(net: &Mlp) -> Vec<LayerWeights> {
        let mut off = 0;
        net.sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights =
                    net.params[off..off + fan_in * fan_out].chunks_exact(fan_in).map(|r| r.to_vec()).collect();
                let bias = net.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out].to_vec();
                off += fan_in * fan_out + fan_out;
                LayerWeights { weights, bias }
            })
            .collect()
    }

    fn to_mlp(layers: &[LayerWeights]) -> Result<Mlp> {
        let first =
            layers.first().and_then(|l| l.weights.first()).ok_or_else(|| Error::Input("empty network".into()))?;
        let mut sizes = vec![first.len()];
        let mut params = Vec::new();
        for l in layers {
            let fan_in = *sizes.last().unwrap();
            if l.weights.len() != l.bias.len() || l.weights.iter().any(|r| r.len() != fan_in) {
                return Err(Error::Input("ragged layer weights".into()));
            }
            for r in &l.weights {
                params.extend_from_slice(r);
            }
            params.extend_from_slice(&l.bias);
            sizes.push(l.bias.len());
        }
        Ok(Mlp { sizes, params })
    }
}

/// Serialised policy: weights, normalisation statistics, provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub schema: u32,
    pub policy_id: String,
    pub actor: Vec<LayerWeights>,
    pub log_std: Vec<f64>,
    pub critic: Vec<LayerWeights>,
    pub obs_norm: RunningNorm,
    pub bounds: ActionBounds,
    pub provenance: Provenance,
    pub experience_ids: Vec<String>,
    pub final_eval_reward: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netsim::ActionBounds;
    use crate::seed;
    use proptest::prelude::*;

    fn policy(seed: u64) -> Policy {
        Policy::new("p", 12, ActionBounds::for_cells(4), 16, 0.0, &mut seed::rng(seed))
    }

    #[test]
    fn deterministic_mode_is_repeatable() {
        let p = policy(1);
        let s = [1.0, 0.5, 2.0, 0.0, 0.3, 0.2, 0.9, 0.1, 12.0, 30.0, 5.0, 0.0];
        let mut rng = seed::rng(0);
        let a = p.act(&s, ActMode::Deterministic, &mut rng).unwrap();
        let b = p.act(&s, ActMode::Deterministic, &mut rng).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mean_maps_to_midpoint() {
        let mut p = policy(2);
        p.actor = Mlp::zeros(&p.actor.sizes);
        let a = p.deterministic_action(&[0.0; 12]).unwrap();
        assert_eq!(a, p.bounds.midpoint());
    }

    #[test]
    fn rejects_nan_and_wrong_dims() {
        let p = policy(3);
        let mut s = [0.0; 12];
        s[4] = f64::NAN;
        assert!(p.deterministic_action(&s).is_err());
        assert!(p.deterministic_action(&[0.0; 5]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let mut p = policy(4);
        p.provenance.trained_task_ids.push("task-01".into());
        let json = serde_json::to_string(&p.to_file()).unwrap();
        let back: PolicyFile = serde_json::from_str(&json).unwrap();
        assert_eq!(Policy::from_file(back, vec![]).unwrap(), p);
    }

    #[test]
    fn log_prob_matches_closed_form() {
        let lp = gaussian_log_prob(&[1.0], &[0.0], &[0.0]);
        assert!((lp - (-0.5 - 0.5 * LN_2PI)).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn sampled_actions_stay_in_bounds(seed in any::<u64>(), scale in 0.0f64..50.0) {
            let mut p = policy(seed);
            p.log_std = vec![LOG_STD_MAX; p.act_dim()];
            let mut rng = seed::rng(seed);
            let s: Vec<f64> = (0..12).map(|i| scale * (i as f64 - 6.0)).collect();
            for _ in 0..160 {
                let a = p.act(&s, ActMode::Stochastic, &mut rng).unwrap();
                prop_assert!(a.within_bounds());
            }
        }
    }
}
