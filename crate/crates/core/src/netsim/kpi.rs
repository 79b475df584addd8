use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Throughput KPIs over the cells of a sector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KpiSet {
    pub g_min: f64,
    pub g_avg: f64,
    /// Population standard deviation.
    pub g_sd: f64,
    /// Number of cells below the threshold `chi`.
    pub g_below_chi: usize,
}

pub fn kpis(throughput: &[f64], chi: f64) -> Result<KpiSet> {
    if throughput.is_empty() {
        return Err(Error::Input("KPIs need at least one cell".into()));
    }
    let n = throughput.len() as f64;
    let g_min = throughput.iter().copied().fold(f64::INFINITY, f64::min);
    let g_avg = throughput.iter().sum::<f64>() / n;
    let var = throughput.iter().map(|x| (x - g_avg).powi(2)).sum::<f64>() / n;
    let g_below_chi = throughput.iter().filter(|&&x| x < chi).count();
    Ok(KpiSet {
        // Guard the rounding case where the mean of equal values dips below them.
        g_min: g_min.min(g_avg),
        g_avg,
        g_sd: var.sqrt(),
        g_below_chi,
    })
}

/// `phi1 G_avg + phi2 G_min + phi3 / (1 + G_sd) + phi4 (N_c - G_<chi)`.
pub fn reward(k: &KpiSet, phi: &[f64; 4], n_cells: usize) -> f64 {
    phi[0] * k.g_avg + phi[1] * k.g_min + phi[2] / (1.0 + k.g_sd) + phi[3] * (n_cells as f64 - k.g_below_chi as f64)
}
