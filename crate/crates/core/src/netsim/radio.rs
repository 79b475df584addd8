use serde::{Deserialize, Serialize};

use super::{ActionParams, SimConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Idle,
    Active,
}

/// A user device. Positions and shadowing are fixed at spawn, so the RSRP
/// towards every cell is computed once and cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Ue {
    pub id: u64,
    pub position: (f64, f64),
    pub shadow_db: Vec<f64>,
    pub mode: Mode,
    /// Camped cell when idle, serving cell when active.
    pub cell: usize,
    pub remaining_bits: f64,
    pub idle_timer_s: f64,
    pub(crate) rsrp_dbm: Vec<f64>,
    pub(crate) sinr_linear: Vec<f64>,
    /// Set when the mobility rule last produced no move under the current
    /// action; cleared whenever the action or the UE's mode changes.
    pub(crate) settled: bool,
}

/// Received reference power of `cell` at `ue`, dBm.
///
/// `tx - (20 log10 f + 10 n log10 d + PL0) + shadow`.
pub fn rsrp(ue: &Ue, cell: usize, cfg: &SimConfig) -> Result<f64> {
    let d = ue.position.0.hypot(ue.position.1);
    if !(d > 0.0) {
        return Err(Error::Domain(format!("UE {} is at distance {d} m", ue.id)));
    }
    let f = cfg.carrier_freqs_mhz[cell];
    let pathloss = 20.0 * f.log10() + 10.0 * cfg.pathloss_exponent * d.log10() + cfg.pathloss_offset_db;
    Ok(cfg.tx_power_dbm[cell] - pathloss + ue.shadow_db[cell])
}

fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

impl Ue {
    pub fn spawn(
        id: u64,
        position: (f64, f64),
        shadow_db: Vec<f64>,
        cell: usize,
        idle_timer_s: f64,
        cfg: &SimConfig,
    ) -> Result<Self> {
        let mut ue = Ue {
            id,
            position,
            shadow_db,
            mode: Mode::Idle,
            cell,
            remaining_bits: 0.0,
            idle_timer_s,
            rsrp_dbm: Vec::new(),
            sinr_linear: Vec::new(),
            settled: false,
        };
        let rsrp_dbm = (0..cfg.n_cells).map(|c| rsrp(&ue, c, cfg)).collect::<Result<Vec<_>>>()?;
        ue.set_rsrp(rsrp_dbm, cfg);
        Ok(ue)
    }

    /// Builds a UE with prescribed RSRP values, bypassing geometry.
    pub fn with_rsrp(id: u64, mode: Mode, cell: usize, rsrp_dbm: Vec<f64>, cfg: &SimConfig) -> Self {
        let mut ue = Ue {
            id,
            position: (cfg.min_distance_m, 0.0),
            shadow_db: vec![0.0; rsrp_dbm.len()],
            mode,
            cell,
            remaining_bits: 0.0,
            idle_timer_s: 0.0,
            rsrp_dbm: Vec::new(),
            sinr_linear: Vec::new(),
            settled: false,
        };
        ue.set_rsrp(rsrp_dbm, cfg);
        ue
    }

    fn set_rsrp(&mut self, rsrp_dbm: Vec<f64>, cfg: &SimConfig) {
        let noise = db_to_linear(cfg.noise_floor_dbm);
        self.sinr_linear = rsrp_dbm
            .iter()
            .enumerate()
            .map(|(c, r)| {
                let n_i = noise + db_to_linear(cfg.interference_floor_dbm[c]);
                let sinr_db = (r - 10.0 * n_i.log10()).min(cfg.max_sinr_db);
                db_to_linear(sinr_db)
            })
            .collect();
        self.rsrp_dbm = rsrp_dbm;
    }

    pub fn rsrp_dbm(&self) -> &[f64] {
        &self.rsrp_dbm
    }

    /// SINR towards `cell` (linear), capped at `max_sinr_db`.
    pub fn sinr(&self, cell: usize) -> f64 {
        self.sinr_linear[cell]
    }

    pub(crate) fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
        self.settled = false;
    }
}

/// Strongest candidate, ties to the lowest index.
fn strongest(candidates: impl Iterator<Item = usize>, rsrp: &[f64]) -> Option<usize> {
    candidates.fold(None, |best, j| match best {
        Some(b) if rsrp[j] <= rsrp[b] => Some(b),
        _ => Some(j),
    })
}

/// Applies the handover rule to an active UE. A target `j` qualifies when
/// `RSRP_j > RSRP_i + alpha_{i,j} + H`; the strongest qualifying target wins.
pub fn try_handover(ue: &mut Ue, action: &ActionParams, cfg: &SimConfig) -> Option<usize> {
    if ue.mode != Mode::Active {
        return None;
    }
    let i = ue.cell;
    let r = &ue.rsrp_dbm;
    let target =
        strongest((0..cfg.n_cells).filter(|&j| j != i && r[j] > r[i] + action.alpha(i, j) + cfg.hysteresis_db), r)?;
    ue.cell = target;
    Some(target)
}

/// Applies the reselection rule to an idle UE. A target `j` qualifies when
/// `RSRP_i < beta_i`, `RSRP_j > lambda_j`, and `j` ranks above the camped
/// cell; the strongest qualifying target wins.
pub fn try_reselect(ue: &mut Ue, action: &ActionParams, cfg: &SimConfig) -> Option<usize> {
    if ue.mode != Mode::Idle {
        return None;
    }
    let i = ue.cell;
    let r = &ue.rsrp_dbm;
    if !(r[i] < action.beta[i]) {
        return None;
    }
    let target = strongest((0..cfg.n_cells).filter(|&j| j != i && r[j] > action.lambda[j] && r[j] > r[i]), r)?;
    ue.cell = target;
    Some(target)
}
