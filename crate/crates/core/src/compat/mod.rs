//! Compatibility between a policy's training experience and a test
//! experience. Every scorer reports a distance where lower means more
//! compatible, and a task is compatible when `distance <= threshold`.

pub mod binseg;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use binseg::{best_split, binseg_gains, median_gamma, rbf_cost, KernelCost, Segmentation};

use crate::rl::Experience;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    Binseg,
    Pearson,
    KpiThreshold,
}

impl ScorerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScorerKind::Binseg => "binseg",
            ScorerKind::Pearson => "pearson",
            ScorerKind::KpiThreshold => "kpi_threshold",
        }
    }
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScorerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binseg" | "bg" => Ok(ScorerKind::Binseg),
            "pearson" | "pr" => Ok(ScorerKind::Pearson),
            "kpi_threshold" | "kt" => Ok(ScorerKind::KpiThreshold),
            other => Err(Error::Config(format!("unknown scorer kind {other:?}"))),
        }
    }
}

/// RBF bandwidth selection for the binseg scorer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median heuristic on the combined normalised series.
    Median,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScorerConfig {
    pub kind: ScorerKind,
    pub bandwidth: Bandwidth,
    pub min_seg: usize,
    /// Half-width of the junction window as a fraction of the total length.
    pub window_fraction: f64,
}

impl Default for ScorerConfig {
    fn default() -> Self {
        ScorerConfig { kind: ScorerKind::Binseg, bandwidth: Bandwidth::Median, min_seg: 10, window_fraction: 0.1 }
    }
}

impl ScorerConfig {
    pub fn with_kind(kind: ScorerKind) -> Self {
        ScorerConfig { kind, ..ScorerConfig::default() }
    }
}

/// A validated scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    cfg: ScorerConfig,
}

impl Scorer {
    pub fn new(cfg: ScorerConfig) -> Result<Self> {
        if cfg.min_seg == 0 {
            return Err(Error::Config("scorer.min_seg must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&cfg.window_fraction) {
            return Err(Error::Config(format!(
                "scorer.window_fraction must be in [0, 0.5], got {}",
                cfg.window_fraction
            )));
        }
        if let Bandwidth::Fixed(g) = cfg.bandwidth {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("fixed RBF gamma must be positive, got {g}")));
            }
        }
        Ok(Scorer { cfg })
    }

    pub fn config(&self) -> &ScorerConfig {
        &self.cfg
    }

    pub fn kind(&self) -> ScorerKind {
        self.cfg.kind
    }

    /// Maps a user-facing threshold onto the distance scale. KT thresholds
    /// are given in Mbps of `G_min` and are negated.
    pub fn distance_threshold(&self, threshold: f64) -> f64 {
        match self.cfg.kind {
            ScorerKind::KpiThreshold => -threshold,
            _ => threshold,
        }
    }

    /// Distance between one training experience and a test experience,
    /// with the per-dimension scores (empty for KT).
    pub fn distance(&self, train: &Experience, test: &Experience) -> Result<(f64, Vec<f64>)> {
        if self.cfg.kind == ScorerKind::KpiThreshold {
            return Ok((kpi_threshold_distance(test)?, Vec::new()));
        }
        if train.dim() != test.dim() {
            return Err(Error::Input(format!("experience dimensions differ: {} vs {}", train.dim(), test.dim())));
        }
        let v = (0..train.dim())
            .map(|d| {
                let (a, b) = (train.column(d), test.column(d));
                match self.cfg.kind {
                    ScorerKind::Binseg => self.binseg_distance(&a, &b),
                    _ => {
                        let a = log1p_all(&a)?;
                        let b = log1p_all(&b)?;
                        pearson_distance(&a, &b)
                    }
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((combine_dimensions(&v)?, v))
    }

    /// Distance to a (possibly merged) policy: the minimum over its
    /// training experiences.
    pub fn assess(
        &self,
        policy_id: &str,
        train: &[Experience],
        test: &Experience,
        threshold: f64,
    ) -> Result<CompatReport> {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for exp in train {
            let (d, v) = self.distance(exp, test)?;
            if best.as_ref().map_or(true, |(bd, _)| d < *bd) {
                best = Some((d, v));
            }
        }
        let (distance, per_dimension) =
            best.ok_or_else(|| Error::Input(format!("policy {policy_id} has no training experience")))?;
        let threshold = self.distance_threshold(threshold);
        Ok(CompatReport {
            policy_id: policy_id.to_string(),
            task_id: test.task_id.clone(),
            kind: self.cfg.kind,
            distance,
            per_dimension,
            compatible: distance <= threshold,
            threshold,
        })
    }

    /// Windowed, length-normalised change-point gain at the junction of
    /// `tau1 ++ tau2`.
    pub fn binseg_distance(&self, tau1: &[f64], tau2: &[f64]) -> Result<f64> {
        if tau1.is_empty() || tau2.is_empty() {
            return Err(Error::Input("binseg distance needs non-empty series".into()));
        }
        let joined: Vec<f64> = tau1.iter().chain(tau2).copied().collect();
        let y = normalize_series(&joined)?;
        let gamma = match self.cfg.bandwidth {
            Bandwidth::Median => median_gamma(&y),
            Bandwidth::Fixed(g) => g,
        };
        let seg = binseg_gains(&y, self.cfg.min_seg, gamma)?;
        let total = y.len() as f64;
        let half = self.cfg.window_fraction * total;
        let t1 = tau1.len() as f64;
        let lo = (t1 - half).ceil().max(0.0) as usize;
        let hi = ((t1 + half).floor() as usize).min(y.len() - 1);
        let peak = seg.gains[lo..=hi].iter().copied().fold(0.0, f64::max);
        Ok(peak / total)
    }
}

fn log1p_all(x: &[f64]) -> Result<Vec<f64>> {
    x.iter()
        .map(|&v| {
            if v < 0.0 || v.is_nan() {
                Err(Error::Input(format!("series values must be >= 0, got {v}")))
            } else {
                Ok(v.ln_1p())
            }
        })
        .collect()
}

/// `log(1 + x)`, then standardised over the whole series.
pub fn normalize_series(x: &[f64]) -> Result<Vec<f64>> {
    let y = log1p_all(x)?;
    if y.is_empty() {
        return Ok(y);
    }
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt().max(1e-8);
    Ok(y.iter().map(|v| (v - mean) / sd).collect())
}

/// `sqrt(1 - r^2)` on the common prefix of both series; r = 0 when either
/// side has zero variance.
pub fn pearson_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    let n = a.len().min(b.len());
    if n < 2 {
        return Err(Error::Input(format!("Pearson distance needs 2 common samples, got {n}")));
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let r = if saa > 0.0 && sbb > 0.0 { (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0) } else { 0.0 };
    Ok((1.0 - r * r).max(0.0).sqrt())
}

/// Per-step `G_min` (Mbps) of an experience, read from its throughput block.
pub fn g_min_series(exp: &Experience) -> Result<Vec<f64>> {
    let dim = exp.dim();
    if dim == 0 || dim % 3 != 0 {
        return Err(Error::Input(format!("state dimension {dim} is not 3 x cells")));
    }
    let n = dim / 3;
    Ok(exp.states.iter().map(|s| s[2 * n..].iter().copied().fold(f64::INFINITY, f64::min)).collect())
}

/// `-min_t G_min(t)`.
pub fn kpi_threshold_distance(test: &Experience) -> Result<f64> {
    let m = g_min_series(test)?.into_iter().fold(f64::INFINITY, f64::min);
    if !m.is_finite() {
        return Err(Error::Input("KPI-threshold distance of an empty experience".into()));
    }
    Ok(-m)
}

pub fn combine_dimensions(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Input("no per-dimension scores to combine".into()));
    }
    Ok(v.iter().map(|x| x * x).sum::<f64>().sqrt())
}

/// Rounds to one significant figure; 0 and non-finite values pass through.
pub fn round_sig1(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    let e = x.abs().log10().floor();
    let scale = 10f64.powf(e);
    let r = (x / scale).round() * scale;
    // Re-derive through the decimal string to drop binary noise such as 0.30000000000000004.
    format!("{r:.0e}").parse().unwrap_or(r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub default: f64,
    pub loose: f64,
    pub tight: f64,
}

/// Median, and median plus/minus one sample standard deviation, each rounded
/// to one significant figure.
pub fn calibrate_threshold(scores: &[f64]) -> Result<Thresholds> {
    if scores.len() < 2 {
        return Err(Error::Input(format!("calibration needs >= 2 scores, got {}", scores.len())));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Input("calibration scores must be finite".into()));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
    let mean = s.iter().sum::<f64>() / n as f64;
    let sd = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
    Ok(Thresholds { default: round_sig1(median), loose: round_sig1(median + sd), tight: round_sig1(median - sd) })
}

/// One scored (policy, task) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompatReport {
    pub policy_id: String,
    pub task_id: String,
    pub kind: ScorerKind,
    pub distance: f64,
    pub per_dimension: Vec<f64>,
    pub compatible: bool,
    /// On the distance scale (negated for KT).
    pub threshold: f64,
}

pub const COMPAT_LOG_HEADER: &str = "iteration,policy_id,task_id,kind,distance,threshold,compatible";

impl CompatReport {
    pub fn write_row(&self, iteration: usize, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "{iteration},{},{},{},{},{},{}",
            self.policy_id, self.task_id, self.kind, self.distance, self.threshold, self.compatible
        )
    }
}
