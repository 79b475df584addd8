use serde::{Deserialize, Serialize};

const CLIP: f64 = 10.0;
const EPS: f64 = 1e-8;

/// Running per-feature mean and variance (Welford), used to standardise
/// policy inputs. Frozen once training ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningNorm {
    pub count: f64,
    pub mean: Vec<f64>,
    pub m2: Vec<f64>,
}

impl RunningNorm {
    pub fn new(dim: usize) -> Self {
        RunningNorm { count: 0.0, mean: vec![0.0; dim], m2: vec![0.0; dim] }
    }

    /// Statistics of a fixed sample.
    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = RunningNorm::new(dim);
        for r in rows {
            n.update(r);
        }
        n
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1.0;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / self.count;
            *s += d * (v - *m);
        }
    }

    pub fn variance(&self, i: usize) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            self.m2[i] / self.count
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(i, v)| ((v - self.mean[i]) / (self.variance(i) + EPS).sqrt()).clamp(-CLIP, CLIP))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_batch_statistics() {
        let rows = [[1.0, 10.0], [2.0, 10.0], [3.0, 10.0], [6.0, 10.0]];
        let n = RunningNorm::fit(2, rows.iter().map(|r| &r[..]));
        assert!((n.mean[0] - 3.0).abs() < 1e-12);
        assert!((n.variance(0) - 3.5).abs() < 1e-12);
        let z = n.normalize(&[3.0, 10.0]);
        assert!(z[0].abs() < 1e-12 && z[1].abs() < 1e-12);
    }
}
