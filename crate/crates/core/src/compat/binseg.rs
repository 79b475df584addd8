//! Kernel (RBF) binary segmentation.

use crate::{Error, Result};

/// `gamma = 1 / (2 median^2)` over all pairwise absolute differences of
/// `series`. Falls back to 1 when the median is 0.
pub fn median_gamma(series: &[f64]) -> f64 {
    let mut d = Vec::with_capacity(series.len() * series.len().saturating_sub(1) / 2);
    for (i, a) in series.iter().enumerate() {
        for b in &series[i + 1..] {
            d.push((a - b).abs());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    let median = if d.len() % 2 == 1 {
        *d.select_nth_unstable_by(mid, f64::total_cmp).1
    } else {
        let hi = *d.select_nth_unstable_by(mid, f64::total_cmp).1;
        let lo = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lo + hi)
    };
    if median > 0.0 {
        1.0 / (2.0 * median * median)
    } else {
        1.0
    }
}

/// Direct evaluation of `C = n - (1/n) sum_{s,t} exp(-gamma (y_s - y_t)^2)`.
pub fn rbf_cost(segment: &[f64], gamma: f64) -> Result<f64> {
    if segment.is_empty() {
        return Err(Error::Input("kernel cost of an empty segment".into()));
    }
    let n = segment.len() as f64;
    let mut s = 0.0;
    for a in segment {
        for b in segment {
            s += (-gamma * (a - b) * (a - b)).exp();
        }
    }
    Ok((n - s / n).max(0.0))
}

/// O(1) segment costs from a 2-D prefix sum of the Gram matrix.
#[derive(Debug, Clone)]
pub struct KernelCost {
    n: usize,
    prefix: Vec<f64>,
}

impl KernelCost {
    pub fn new(series: &[f64], gamma: f64) -> Self {
        let n = series.len();
        let w = n + 1;
        let mut prefix = vec![0.0; w * w];
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                let d = series[i] - series[j];
                row += (-gamma * d * d).exp();
                prefix[(i + 1) * w + j + 1] = prefix[i * w + j + 1] + row;
            }
        }
        KernelCost { n, prefix }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Cost of `series[a..b]`; zero for empty ranges.
    pub fn cost(&self, a: usize, b: usize) -> f64 {
        if b <= a {
            return 0.0;
        }
        let w = self.n + 1;
        let p = |i: usize, j: usize| self.prefix[i * w + j];
        let s = p(b, b) - p(a, b) - p(b, a) + p(a, a);
        let len = (b - a) as f64;
        (len - s / len).max(0.0)
    }

    /// `C(a..b) - C(a..t) - C(t..b)`.
    pub fn gain(&self, a: usize, t: usize, b: usize) -> f64 {
        self.cost(a, b) - self.cost(a, t) - self.cost(t, b)
    }
}

/// Gain curve and split points found by recursive segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    /// One value per position; each holds the gain from the deepest segment
    /// in which the position was an admissible split, or 0.
    pub gains: Vec<f64>,
    /// Split points in discovery order; the first is the root split.
    pub splits: Vec<usize>,
}

/// Root-level argmax over admissible splits `min_seg..=len-min_seg`
/// (first index on ties).
pub fn best_split(cost: &KernelCost, a: usize, b: usize, min_seg: usize) -> Option<(usize, f64)> {
    if b < a + 2 * min_seg {
        return None;
    }
    let mut best: Option<(usize, f64)> = None;
    for t in a + min_seg..=b - min_seg {
        let g = cost.gain(a, t, b);
        if best.map_or(true, |(_, bg)| g > bg) {
            best = Some((t, g));
        }
    }
    best
}

pub fn binseg_gains(series: &[f64], min_seg: usize, gamma: f64) -> Result<Segmentation> {
    let min_seg = min_seg.max(1);
    if series.len() < 2 * min_seg {
        return Err(Error::Input(format!(
            "binary segmentation needs at least {} samples, got {}",
            2 * min_seg,
            series.len()
        )));
    }
    let cost = KernelCost::new(series, gamma);
    Ok(segment_with(&cost, min_seg))
}

pub(crate) fn segment_with(cost: &KernelCost, min_seg: usize) -> Segmentation {
    let mut out = Segmentation { gains: vec![0.0; cost.len()], splits: Vec::new() };
    let mut stack = vec![(0, cost.len())];
    while let Some((a, b)) = stack.pop() {
        let Some((t, _)) = best_split(cost, a, b, min_seg) else { continue };
        for s in a + min_seg..=b - min_seg {
            out.gains[s] = cost.gain(a, s, b);
        }
        out.splits.push(t);
        // Right pushed first so the left child is processed next.
        stack.push((t, b));
        stack.push((a, t));
    }
    out
}
