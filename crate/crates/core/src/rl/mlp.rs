use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Fully connected network: tanh on every hidden layer, linear output.
///
/// Parameters live in one flat vector, layer by layer, each layer stored as
/// its row-major weight matrix (`out x in`) followed by its bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
}

/// Per-layer outputs of a forward pass, reused across calls.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    layers: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.layers.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp { sizes: sizes.to_vec(), params: vec![0.0; param_count(sizes)] }
    }

    /// Gaussian init with std `1/sqrt(fan_in)`; the output layer is further
    /// scaled by `out_scale`. Biases start at zero.
    pub fn init(sizes: &[usize], out_scale: f64, rng: &mut impl Rng) -> Self {
        let mut net = Mlp::zeros(sizes);
        let mut off = 0;
        let last = sizes.len() - 2;
        for (l, w) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let scale = if l == last { out_scale } else { 1.0 };
            let dist = Normal::new(0.0, scale / (fan_in as f64).sqrt()).expect("positive std");
            for p in &mut net.params[off..off + fan_in * fan_out] {
                *p = dist.sample(rng);
            }
            off += fan_in * fan_out + fan_out;
        }
        net
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut acts = Activations::default();
        self.forward_into(x, &mut acts);
        acts.layers.pop().unwrap_or_default()
    }

    pub fn forward_into(&self, x: &[f64], acts: &mut Activations) {
        debug_assert_eq!(x.len(), self.sizes[0]);
        let n_layers = self.sizes.len();
        acts.layers.resize_with(n_layers, Vec::new);
        acts.layers[0].clear();
        acts.layers[0].extend_from_slice(x);
        let mut off = 0;
        for l in 1..n_layers {
            let (fan_in, fan_out) = (self.sizes[l - 1], self.sizes[l]);
            let (prev, rest) = acts.layers.split_at_mut(l);
            let input = &prev[l - 1];
            let out = &mut rest[0];
            out.clear();
            let w = &self.params[off..off + fan_in * fan_out];
            let b = &self.params[off + fan_in * fan_out..off + fan_in * fan_out + fan_out];
            let hidden = l + 1 < n_layers;
            for (row, bias) in w.chunks_exact(fan_in).zip(b) {
                let z = bias + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
                out.push(if hidden { z.tanh() } else { z });
            }
            off += fan_in * fan_out + fan_out;
        }
    }

    /// Accumulates `d loss / d params` into `grad` given `dout = d loss / d
    /// output` for the pass recorded in `acts`.
    pub fn backward(&self, acts: &Activations, dout: &[f64], grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.params.len());
        let n_layers = self.sizes.len();
        let mut offsets = Vec::with_capacity(n_layers - 1);
        let mut off = 0;
        for w in self.sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        let mut delta = dout.to_vec();
        for l in (1..n_layers).rev() {
            let (fan_in, fan_out) = (self.sizes[l - 1], self.sizes[l]);
            let off = offsets[l - 1];
            let input = &acts.layers[l - 1];
            {
                let (gw, gb) = grad[off..off + fan_in * fan_out + fan_out].split_at_mut(fan_in * fan_out);
                for ((row, gbi), d) in gw.chunks_exact_mut(fan_in).zip(gb.iter_mut()).zip(&delta) {
                    *gbi += d;
                    for (g, a) in row.iter_mut().zip(input) {
                        *g += d * a;
                    }
                }
            }
            if l > 1 {
                let w = &self.params[off..off + fan_in * fan_out];
                let mut prev = vec![0.0; fan_in];
                for (row, d) in w.chunks_exact(fan_in).zip(&delta) {
                    for (p, wv) in prev.iter_mut().zip(row) {
                        *p += d * wv;
                    }
                }
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
                delta = prev;
            }
        }
    }
}
