use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Allowed handover offset `alpha`, dB.
pub const ALPHA_RANGE: (f64, f64) = (-6.0, 6.0);
/// Allowed reselection thresholds `beta` and `lambda`, dBm.
pub const THRESHOLD_RANGE: (f64, f64) = (-110.0, -80.0);

/// Load-balancing parameters applied for one control step.
///
/// `alpha` holds one handover offset per ordered pair `(i, j)`, `i != j`, in
/// row-major order with the diagonal skipped. `beta[i]` is the level below
/// which an idle UE may leave cell `i`; `lambda[j]` the level cell `j` must
/// exceed to be joined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionParams {
    pub n_cells: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub lambda: Vec<f64>,
}

impl ActionParams {
    pub fn uniform(n_cells: usize, alpha: f64, beta: f64, lambda: f64) -> Self {
        ActionParams {
            n_cells,
            alpha: vec![alpha; n_cells * (n_cells - 1)],
            beta: vec![beta; n_cells],
            lambda: vec![lambda; n_cells],
        }
    }

    /// Index of `alpha_{i,j}` in the flat pair layout.
    pub fn pair_index(n_cells: usize, i: usize, j: usize) -> usize {
        debug_assert!(i != j && i < n_cells && j < n_cells);
        i * (n_cells - 1) + if j > i { j - 1 } else { j }
    }

    pub fn alpha(&self, i: usize, j: usize) -> f64 {
        self.alpha[Self::pair_index(self.n_cells, i, j)]
    }

    pub fn set_alpha(&mut self, i: usize, j: usize, value: f64) {
        let idx = Self::pair_index(self.n_cells, i, j);
        self.alpha[idx] = value;
    }

    pub fn dim(&self) -> usize {
        self.alpha.len() + self.beta.len() + self.lambda.len()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.alpha);
        v.extend_from_slice(&self.beta);
        v.extend_from_slice(&self.lambda);
        v
    }

    pub fn from_flat(n_cells: usize, flat: &[f64]) -> Result<Self> {
        let pairs = n_cells * (n_cells - 1);
        if flat.len() != pairs + 2 * n_cells {
            return Err(Error::Input(format!("action has {} entries, expected {}", flat.len(), pairs + 2 * n_cells)));
        }
        Ok(ActionParams {
            n_cells,
            alpha: flat[..pairs].to_vec(),
            beta: flat[pairs..pairs + n_cells].to_vec(),
            lambda: flat[pairs + n_cells..].to_vec(),
        })
    }

    fn check_shape(&self) -> Result<()> {
        let n = self.n_cells;
        if self.alpha.len() != n * (n - 1) || self.beta.len() != n || self.lambda.len() != n {
            return Err(Error::Input(format!("action shape does not match {n} cells")));
        }
        Ok(())
    }

    pub fn within_bounds(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        self.alpha.iter().all(|&a| inside(a, ALPHA_RANGE))
            && self.beta.iter().chain(&self.lambda).all(|&b| inside(b, THRESHOLD_RANGE))
    }

    /// Clamps every entry into its range; NaN maps to the range midpoint.
    /// Returns whether anything changed.
    pub fn clamp_in_place(&mut self) -> Result<bool> {
        self.check_shape()?;
        let mut changed = false;
        let mut clamp = |v: &mut f64, (lo, hi): (f64, f64)| {
            let c = if v.is_nan() { 0.5 * (lo + hi) } else { v.clamp(lo, hi) };
            if c != *v || v.is_nan() {
                changed = true;
            }
            *v = c;
        };
        for a in &mut self.alpha {
            clamp(a, ALPHA_RANGE);
        }
        for b in self.beta.iter_mut().chain(self.lambda.iter_mut()) {
            clamp(b, THRESHOLD_RANGE);
        }
        Ok(changed)
    }
}

/// Per-dimension box for flattened actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl ActionBounds {
    pub fn for_cells(n_cells: usize) -> Self {
        let pairs = n_cells * (n_cells - 1);
        let mut low = vec![ALPHA_RANGE.0; pairs];
        let mut high = vec![ALPHA_RANGE.1; pairs];
        low.extend(std::iter::repeat(THRESHOLD_RANGE.0).take(2 * n_cells));
        high.extend(std::iter::repeat(THRESHOLD_RANGE.1).take(2 * n_cells));
        ActionBounds { low, high }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    /// Euclidean norm of the box widths.
    pub fn range_norm(&self) -> f64 {
        self.low.iter().zip(&self.high).map(|(l, h)| (h - l) * (h - l)).sum::<f64>().sqrt()
    }

    /// Maps a pre-squash vector through `tanh` onto the box.
    pub fn squash(&self, u: &[f64]) -> Vec<f64> {
        u.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(x, (l, h))| {
                let a = l + 0.5 * (h - l) * (x.tanh() + 1.0);
                a.clamp(*l, *h)
            })
            .collect()
    }

    pub fn midpoint(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }
}
