use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::radio::{try_handover, try_reselect, Mode, Ue};
use super::{kpis, reward, ActionParams, KpiSet, SimConfig, TrafficTask};
use crate::{seed, Error, Result};

const BITS_PER_MB: f64 = 8.0e6;

/// Step-averaged observation of the sector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub active_ues: Vec<f64>,
    pub utilization: Vec<f64>,
    /// Mean per-UE scheduled rate, Mbps.
    pub throughput: Vec<f64>,
}

impl StateVector {
    pub fn zeros(n_cells: usize) -> Self {
        StateVector { active_ues: vec![0.0; n_cells], utilization: vec![0.0; n_cells], throughput: vec![0.0; n_cells] }
    }

    pub fn n_cells(&self) -> usize {
        self.active_ues.len()
    }

    /// `[active_0.., util_0.., thr_0..]`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(3 * self.n_cells());
        v.extend_from_slice(&self.active_ues);
        v.extend_from_slice(&self.utilization);
        v.extend_from_slice(&self.throughput);
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || flat.len() % 3 != 0 {
            return Err(Error::Input(format!("state of length {} is not 3*N_c", flat.len())));
        }
        let n = flat.len() / 3;
        Ok(StateVector {
            active_ues: flat[..n].to_vec(),
            utilization: flat[n..2 * n].to_vec(),
            throughput: flat[2 * n..].to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: StateVector,
    /// KPIs on raw (Mbps) throughput.
    pub kpis: KpiSet,
    pub reward: f64,
    /// The submitted action was outside its bounds and got clamped.
    pub clamped: bool,
    pub arrivals: usize,
    pub departures: usize,
}

/// Population bookkeeping and raw per-cell utilisation for one tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickReport {
    pub population_before: usize,
    pub arrivals: usize,
    pub departures: usize,
    pub population_after: usize,
    /// Share of each cell's resources consumed, before any clamping.
    pub utilization: Vec<f64>,
}

#[derive(Default)]
struct StepAccumulator {
    active: Vec<f64>,
    util: Vec<f64>,
    thr: Vec<f64>,
    busy_ticks: Vec<u32>,
}

impl StepAccumulator {
    fn new(n: usize) -> Self {
        StepAccumulator { active: vec![0.0; n], util: vec![0.0; n], thr: vec![0.0; n], busy_ticks: vec![0; n] }
    }
}

/// One sector driven by one traffic task. Single-threaded; `Send`.
pub struct Simulator {
    cfg: SimConfig,
    task: TrafficTask,
    rng: ChaCha8Rng,
    ues: Vec<Ue>,
    next_id: u64,
    time_s: f64,
    steps_done: usize,
    action: ActionParams,
    dwell: Exp<f64>,
    demand: Exp<f64>,
    shadow: Option<Normal<f64>>,
    // Scratch buffers reused across ticks.
    n_active: Vec<usize>,
    acc: StepAccumulator,
}

impl Simulator {
    pub fn new(cfg: &SimConfig, task: &TrafficTask, seed: u64) -> Result<Self> {
        cfg.validate()?;
        task.check_runnable(cfg.n_cells)?;
        let dwell = Exp::new(1.0 / task.idle_dwell_mean_s).map_err(|e| Error::Input(format!("idle dwell: {e}")))?;
        let demand = Exp::new(1.0 / (task.mean_file_size_mb * BITS_PER_MB))
            .map_err(|e| Error::Input(format!("file size: {e}")))?;
        let shadow = if cfg.shadow_sigma_db > 0.0 {
            Some(Normal::new(0.0, cfg.shadow_sigma_db).map_err(|e| Error::Config(format!("shadowing: {e}")))?)
        } else {
            None
        };
        let n = cfg.n_cells;
        Ok(Simulator {
            cfg: cfg.clone(),
            task: task.clone(),
            rng: seed::rng(seed::mix(seed ^ seed::mix(task.seed))),
            ues: Vec::new(),
            next_id: 0,
            time_s: 0.0,
            steps_done: 0,
            action: ActionParams::uniform(n, 0.0, -95.0, -95.0),
            dwell,
            demand,
            shadow,
            n_active: vec![0; n],
            acc: StepAccumulator::new(n),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn task(&self) -> &TrafficTask {
        &self.task
    }

    pub fn ues(&self) -> &[Ue] {
        &self.ues
    }

    pub fn population(&self) -> usize {
        self.ues.len()
    }

    pub fn time_s(&self) -> f64 {
        self.time_s
    }

    pub fn steps_done(&self) -> usize {
        self.steps_done
    }

    /// True once `episode_steps` control steps have run.
    pub fn done(&self) -> bool {
        self.steps_done >= self.cfg.episode_steps
    }

    /// Installs `action` (clamped into bounds) for the following ticks.
    /// Returns whether clamping was needed.
    pub fn set_action(&mut self, action: &ActionParams) -> Result<bool> {
        if action.n_cells != self.cfg.n_cells {
            return Err(Error::Input(format!(
                "action for {} cells, simulator has {}",
                action.n_cells, self.cfg.n_cells
            )));
        }
        let mut a = action.clone();
        let clamped = a.clamp_in_place()?;
        if a != self.action {
            self.action = a;
            for ue in &mut self.ues {
                ue.settled = false;
            }
        }
        Ok(clamped)
    }

    fn spawn(&mut self, cell: usize) -> Result<()> {
        let (r0, r1) = (self.cfg.min_distance_m, self.cfg.max_distance_m);
        let d = self.rng.gen_range(r0 * r0..=r1 * r1).sqrt();
        let theta = self.rng.gen_range(0.0..std::f64::consts::TAU);
        let shadow_db = match &self.shadow {
            Some(n) => (0..self.cfg.n_cells).map(|_| n.sample(&mut self.rng)).collect(),
            None => vec![0.0; self.cfg.n_cells],
        };
        let timer = self.dwell.sample(&mut self.rng);
        let ue = Ue::spawn(self.next_id, (d * theta.cos(), d * theta.sin()), shadow_db, cell, timer, &self.cfg)?;
        self.next_id += 1;
        self.ues.push(ue);
        Ok(())
    }

    /// Advances one tick under the installed action.
    pub fn tick(&mut self) -> Result<TickReport> {
        let n = self.cfg.n_cells;
        let dt = self.cfg.tick_s;
        let population_before = self.ues.len();

        let mut arrivals = 0;
        for cell in 0..n {
            let lam = self.task.cells[cell].rate_at(self.time_s) * dt;
            if lam <= 0.0 {
                continue;
            }
            let draws = Poisson::new(lam)
                .map_err(|e| Error::Domain(format!("arrival rate {lam}: {e}")))?
                .sample(&mut self.rng) as usize;
            for _ in 0..draws {
                if self.ues.len() >= self.cfg.max_ues {
                    break;
                }
                self.spawn(cell)?;
                arrivals += 1;
            }
        }

        for ue in &mut self.ues {
            if ue.mode == Mode::Idle {
                ue.idle_timer_s -= dt;
                if ue.idle_timer_s <= 0.0 {
                    ue.set_mode(Mode::Active);
                    ue.remaining_bits = self.demand.sample(&mut self.rng);
                }
            }
        }

        self.n_active.iter_mut().for_each(|c| *c = 0);
        for ue in &self.ues {
            if ue.mode == Mode::Active {
                self.n_active[ue.cell] += 1;
            }
        }
        let mut util = vec![0.0; n];
        let mut rate_sum = vec![0.0; n];
        for ue in &mut self.ues {
            if ue.mode != Mode::Active {
                continue;
            }
            let c = ue.cell;
            let share = self.n_active[c] as f64;
            let rate = self.cfg.bandwidths_mhz[c] * 1e6 * (1.0 + ue.sinr(c)).log2() / share;
            let capacity = rate * dt;
            let served = ue.remaining_bits.min(capacity);
            ue.remaining_bits -= served;
            if capacity > 0.0 {
                util[c] += served / capacity;
            }
            rate_sum[c] += rate / 1e6;
        }
        for c in 0..n {
            let k = self.n_active[c];
            self.acc.active[c] += k as f64;
            if k > 0 {
                // Each term is <= 1, so one division keeps the share <= 1 exactly.
                util[c] /= k as f64;
                self.acc.util[c] += util[c];
                self.acc.thr[c] += rate_sum[c] / k as f64;
                self.acc.busy_ticks[c] += 1;
            }
        }

        let mut departures = 0;
        let mut i = 0;
        while i < self.ues.len() {
            let ue = &mut self.ues[i];
            if ue.mode == Mode::Active && ue.remaining_bits <= 1e-9 {
                if self.rng.gen_bool(self.task.p_depart_after_service) {
                    self.ues.remove(i);
                    departures += 1;
                    continue;
                }
                ue.remaining_bits = 0.0;
                ue.set_mode(Mode::Idle);
                ue.idle_timer_s = self.dwell.sample(&mut self.rng);
            }
            i += 1;
        }

        for ue in &mut self.ues {
            if ue.settled {
                continue;
            }
            let moved = match ue.mode {
                Mode::Idle => try_reselect(ue, &self.action, &self.cfg),
                Mode::Active => try_handover(ue, &self.action, &self.cfg),
            };
            ue.settled = moved.is_none();
        }

        self.time_s += dt;
        Ok(TickReport { population_before, arrivals, departures, population_after: self.ues.len(), utilization: util })
    }

    /// Runs one control step of `ticks_per_step` ticks under `action`.
    pub fn step(&mut self, action: &ActionParams) -> Result<StepOutcome> {
        let clamped = self.set_action(action)?;
        let n = self.cfg.n_cells;
        self.acc = StepAccumulator::new(n);
        let (mut arrivals, mut departures) = (0, 0);
        for _ in 0..self.cfg.ticks_per_step {
            let r = self.tick()?;
            arrivals += r.arrivals;
            departures += r.departures;
        }
        let ticks = self.cfg.ticks_per_step as f64;
        let state = StateVector {
            active_ues: self.acc.active.iter().map(|a| a / ticks).collect(),
            utilization: self.acc.util.iter().map(|u| (u / ticks).clamp(0.0, 1.0)).collect(),
            throughput: self
                .acc
                .thr
                .iter()
                .zip(&self.acc.busy_ticks)
                .map(|(t, &b)| if b > 0 { t / b as f64 } else { 0.0 })
                .collect(),
        };
        let raw = kpis(&state.throughput, self.cfg.chi_mbps)?;
        let s = self.cfg.throughput_scale_mbps;
        let scaled =
            KpiSet { g_min: raw.g_min / s, g_avg: raw.g_avg / s, g_sd: raw.g_sd / s, g_below_chi: raw.g_below_chi };
        let r = reward(&scaled, &self.cfg.phi, n);
        self.steps_done += 1;
        Ok(StepOutcome { state, kpis: raw, reward: r, clamped, arrivals, departures })
    }
}
