//! Gaussian MLP policies trained with PPO, plus evaluation rollouts.
//!
//! Gradients are written out by hand for the fixed architecture (two tanh
//! hidden layers and a linear head) and validated against central finite
//! differences in [`gradcheck`].

mod adam;
mod experience;
mod gae;
pub mod gradcheck;
mod mlp;
mod norm;
mod policy;
mod ppo;
mod rollout;

pub use adam::Adam;
pub use experience::Experience;
pub use gae::gae;
pub use gradcheck::{policy_gradient_check, GradCheck};
pub use mlp::{Activations, Mlp};
pub use norm::RunningNorm;
pub use policy::{gaussian_log_prob, ActMode, Policy, PolicyFile, Provenance};
pub use ppo::{
    final_eval_seed, pg_loss, policy_loss, ppo_update, train_policy, value_loss, vanilla_pg_update, Batch, Optimizers,
    PpoConfig, UpdateStats,
};
pub use rollout::{evaluate_policy, rollout, rollout_with, Controller, FixedController, Rollout};
