//! Seeded discrete-time simulator of one cellular sector.
//!
//! The sector hosts `n_cells` co-located cells on distinct carriers. UEs arrive
//! idle, camp on a cell, activate after an exponential dwell, download a file
//! under equal-share scheduling, and then either leave or go idle again. Idle
//! UEs follow the reselection rule and active UEs the handover rule, both
//! parameterised by the controller's [`ActionParams`].

mod action;
mod config;
mod kpi;
mod radio;
mod sim;
mod task;
mod trace;

pub use action::{ActionBounds, ActionParams, ALPHA_RANGE, THRESHOLD_RANGE};
pub use config::SimConfig;
pub use kpi::{kpis, reward, KpiSet};
pub use radio::{rsrp, try_handover, try_reselect, Mode, Ue};
pub use sim::{Simulator, StateVector, StepOutcome, TickReport};
pub use task::{generate_tasks, read_task_file, write_task_file, CellTraffic, TaskSet, TrafficTask};
pub use trace::TraceWriter;
