//! Policy-bank construction for inter-frequency load balancing.
//!
//! Tasks (cell-site traffic scenarios) are processed in sampled batches. Each
//! batch is cross-evaluated against the current bank of policies, scored for
//! compatibility by change-point detection on the resulting state trajectories,
//! and only the incompatible tasks get a freshly trained policy. Once the bank
//! grows past its cap, the most similar policies are merged by distillation.
//!
//! Module map:
//!
//! * [`netsim`]: seeded single-sector cellular simulator and reward.
//! * [`rl`]: Gaussian MLP policy, PPO with GAE, evaluation rollouts.
//! * [`compat`]: compatibility scorers (kernel binary segmentation, Pearson,
//!   KPI threshold) and threshold calibration.
//! * [`distill`]: policy similarity and pairwise distillation merging.
//! * [`grouping`]: the sequential task-grouping orchestrator.
//! * [`metrics`]: performance `rho`, ratio `xi`, and the FP / AR baselines.
//! * [`experiment`]: run directories, logs, and report aggregation.

pub mod bank;
pub mod compat;
pub mod distill;
pub mod error;
pub mod experiment;
pub mod grouping;
pub mod metrics;
pub mod netsim;
pub mod par;
pub mod rl;
pub mod seed;

pub use error::{Error, Result};

/// Version stamped into every file this crate writes.
pub const SCHEMA_VERSION: u32 = 1;
