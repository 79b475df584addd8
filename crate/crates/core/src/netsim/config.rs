use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Radio, timing, and reward parameters of the sector simulator.
///
/// Defaults model four co-located carriers. Low bands reach further, so the
/// narrow 800 MHz cell is usually the strongest one and load balancing has to
/// push UEs up to the wider carriers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n_cells: usize,
    pub carrier_freqs_mhz: Vec<f64>,
    pub bandwidths_mhz: Vec<f64>,
    /// Reference-signal EIRP per cell, antenna gains included.
    pub tx_power_dbm: Vec<f64>,
    pub hysteresis_db: f64,
    pub pathloss_exponent: f64,
    /// Constant term `PL0` of the log-distance path loss.
    pub pathloss_offset_db: f64,
    pub shadow_sigma_db: f64,
    pub noise_floor_dbm: f64,
    /// Stand-in for neighbour-site interference, one constant per cell.
    pub interference_floor_dbm: Vec<f64>,
    pub min_distance_m: f64,
    pub max_distance_m: f64,
    pub max_sinr_db: f64,
    pub tick_s: f64,
    pub ticks_per_step: usize,
    pub episode_steps: usize,
    /// KPI threshold `chi` on per-cell throughput, Mbps.
    pub chi_mbps: f64,
    /// Reward coefficients for (G_avg, G_min, 1/(1+G_sd), N_c - G_<chi).
    pub phi: [f64; 4],
    /// Throughput KPIs are divided by this before entering the reward.
    pub throughput_scale_mbps: f64,
    /// Arrivals are blocked while this many UEs are in the sector.
    pub max_ues: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let freqs = vec![800.0, 1800.0, 2100.0, 2600.0];
        let interference = freqs.iter().map(|f: &f64| -112.0 - 20.0 * (f / 800.0).log10()).collect();
        SimConfig {
            n_cells: 4,
            carrier_freqs_mhz: freqs,
            bandwidths_mhz: vec![10.0, 15.0, 20.0, 20.0],
            tx_power_dbm: vec![80.0; 4],
            hysteresis_db: 2.0,
            pathloss_exponent: 3.5,
            pathloss_offset_db: 32.0,
            shadow_sigma_db: 6.0,
            noise_floor_dbm: -125.0,
            interference_floor_dbm: interference,
            min_distance_m: 35.0,
            max_distance_m: 500.0,
            max_sinr_db: 30.0,
            tick_s: 1.0,
            ticks_per_step: 60,
            episode_steps: 240,
            chi_mbps: 1.0,
            phi: [0.25; 4],
            throughput_scale_mbps: 10.0,
            max_ues: 3000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.n_cells;
        if n < 2 {
            return Err(Error::Config(format!("n_cells must be >= 2, got {n}")));
        }
        for (name, len) in [
            ("carrier_freqs_mhz", self.carrier_freqs_mhz.len()),
            ("bandwidths_mhz", self.bandwidths_mhz.len()),
            ("tx_power_dbm", self.tx_power_dbm.len()),
            ("interference_floor_dbm", self.interference_floor_dbm.len()),
        ] {
            if len != n {
                return Err(Error::Config(format!("{name} has {len} entries, expected {n}")));
            }
        }
        if self.bandwidths_mhz.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("all bandwidths must be > 0".into()));
        }
        if self.carrier_freqs_mhz.iter().any(|f| !(*f > 0.0)) {
            return Err(Error::Config("all carrier frequencies must be > 0".into()));
        }
        if self.ticks_per_step < 1 {
            return Err(Error::Config("ticks_per_step must be >= 1".into()));
        }
        if self.episode_steps < 1 {
            return Err(Error::Config("episode_steps must be >= 1".into()));
        }
        if !(self.tick_s > 0.0) {
            return Err(Error::Config("tick_s must be > 0".into()));
        }
        if self.phi.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
            return Err(Error::Config("phi entries must be finite and >= 0".into()));
        }
        if !(self.min_distance_m > 0.0 && self.max_distance_m >= self.min_distance_m) {
            return Err(Error::Config("need 0 < min_distance_m <= max_distance_m".into()));
        }
        if !(self.throughput_scale_mbps > 0.0) {
            return Err(Error::Config("throughput_scale_mbps must be > 0".into()));
        }
        Ok(())
    }

    /// Length of a state vector: active UEs, utilisation, throughput per cell.
    pub fn state_dim(&self) -> usize {
        3 * self.n_cells
    }

    /// Length of a flattened action: one offset per ordered pair plus two
    /// thresholds per cell.
    pub fn action_dim(&self) -> usize {
        self.n_cells * (self.n_cells - 1) + 2 * self.n_cells
    }

    /// Simulated seconds in one control step.
    pub fn step_seconds(&self) -> f64 {
        self.tick_s * self.ticks_per_step as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        let cfg = SimConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.state_dim(), 12);
        assert_eq!(cfg.action_dim(), 20);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = SimConfig::default();
        cfg.n_cells = 1;
        assert!(cfg.validate().is_err());

        let mut cfg = SimConfig::default();
        cfg.bandwidths_mhz[2] = 0.0;
        assert!(cfg.validate().is_err());

        let mut cfg = SimConfig::default();
        cfg.ticks_per_step = 0;
        assert!(cfg.validate().is_err());

        let mut cfg = SimConfig::default();
        cfg.phi[1] = -0.1;
        assert!(cfg.validate().is_err());
    }
}
