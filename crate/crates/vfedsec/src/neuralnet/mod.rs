//! Minimal dense network engine with manual backpropagation: linear layers,
//! ReLU, batch normalization with column masking, cross-entropy losses, SGD,
//! and classification metrics. Everything runs on [`RealMatrix`] in f64.

pub mod batchnorm;
pub mod loss;
pub mod metrics;
pub mod model;

pub use batchnorm::{BatchNormLayer, BnCache};
pub use loss::{loss_and_grad, Task};
pub use metrics::{metric_accuracy, metric_auc};
pub use model::{ModelDims, SplitModel, TopModel};

use crate::qcode::RealMatrix;
use rand::Rng;

/// A dense affine layer, optionally biased.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `in_dim x out_dim` weights.
    pub weights: RealMatrix,
    pub bias: Option<Vec<f64>>,
}

/// Gradients mirroring a dense layer's parameters.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub d_weights: RealMatrix,
    pub d_bias: Option<Vec<f64>>,
}

impl DenseLayer {
    /// Initializes uniformly in `(-1/sqrt(in_dim), +1/sqrt(in_dim))`.
    pub fn new_seeded(in_dim: usize, out_dim: usize, biased: bool, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim.max(1) as f64).sqrt();
        let weights =
            RealMatrix::from_fn(in_dim, out_dim, |_, _| rng.gen_range(-bound..bound));
        let bias = biased.then(|| (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect());
        DenseLayer { weights, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.rows
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols
    }

    pub fn forward(&self, x: &RealMatrix) -> RealMatrix {
        assert_eq!(x.cols, self.in_dim(), "input width must match layer");
        let mut y = x.matmul(&self.weights);
        if let Some(b) = &self.bias {
            for i in 0..y.rows {
                for j in 0..y.cols {
                    y.data[i * y.cols + j] += b[j];
                }
            }
        }
        y
    }

    /// Chain rule for the affine map: returns the input gradient plus
    /// parameter gradients.
    pub fn backward(&self, x: &RealMatrix, d_out: &RealMatrix) -> (RealMatrix, DenseGrads) {
        assert_eq!(d_out.cols, self.out_dim());
        assert_eq!(d_out.rows, x.rows);
        let d_input = d_out.matmul(&self.weights.transpose());
        let d_weights = x.transpose().matmul(d_out);
        let d_bias = self.bias.as_ref().map(|_| {
            (0..self.out_dim())
                .map(|j| (0..d_out.rows).map(|i| d_out.get(i, j)).sum())
                .collect()
        });
        (d_input, DenseGrads { d_weights, d_bias })
    }

    pub fn apply_sgd(&mut self, grads: &DenseGrads, lr: f64) {
        assert_eq!(
            (grads.d_weights.rows, grads.d_weights.cols),
            (self.weights.rows, self.weights.cols)
        );
        for (w, g) in self.weights.data.iter_mut().zip(&grads.d_weights.data) {
            *w -= lr * g;
        }
        if let (Some(b), Some(db)) = (self.bias.as_mut(), grads.d_bias.as_ref()) {
            for (w, g) in b.iter_mut().zip(db) {
                *w -= lr * g;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.weights.data.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

pub fn relu_forward(x: &RealMatrix) -> RealMatrix {
    x.map(|v| v.max(0.0))
}

/// Gradient gate at `x > 0`.
pub fn relu_backward(x: &RealMatrix, d_out: &RealMatrix) -> RealMatrix {
    assert_eq!((x.rows, x.cols), (d_out.rows, d_out.cols));
    let data = x
        .data
        .iter()
        .zip(&d_out.data)
        .map(|(&v, &d)| if v > 0.0 { d } else { 0.0 })
        .collect();
    RealMatrix { rows: x.rows, cols: x.cols, data }
}

/// A dense stack with ReLU between layers and a linear final layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Forward activations needed to run the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer.
    inputs: Vec<RealMatrix>,
    /// Pre-activation output of each non-final layer.
    pre_acts: Vec<RealMatrix>,
}

impl Mlp {
    /// Builds a stack through `dims` (input width first, output width last),
    /// biased or not throughout.
    pub fn new_seeded(dims: &[usize], biased: bool, rng: &mut impl Rng) -> Self {
        assert!(dims.len() >= 2, "a stack needs input and output widths");
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer::new_seeded(w[0], w[1], biased, rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().unwrap().in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&self, x: &RealMatrix) -> RealMatrix {
        self.forward_cached(x).0
    }

    pub fn forward_cached(&self, x: &RealMatrix) -> (RealMatrix, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::new();
        let mut a = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            inputs.push(a.clone());
            let z = layer.forward(&a);
            if idx + 1 < self.layers.len() {
                pre_acts.push(z.clone());
                a = relu_forward(&z);
            } else {
                a = z;
            }
        }
        (a, MlpCache { inputs, pre_acts })
    }

    /// Backpropagates `d_out`, returning the input gradient and per-layer
    /// parameter gradients (front to back).
    pub fn backward(&self, cache: &MlpCache, d_out: &RealMatrix) -> (RealMatrix, Vec<DenseGrads>) {
        let mut grads: Vec<DenseGrads> = Vec::with_capacity(self.layers.len());
        let mut d = d_out.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let (d_input, g) = layer.backward(&cache.inputs[idx], &d);
            grads.push(g);
            d = if idx > 0 {
                relu_backward(&cache.pre_acts[idx - 1], &d_input)
            } else {
                d_input
            };
        }
        grads.reverse();
        (d, grads)
    }

    pub fn apply_sgd(&mut self, grads: &[DenseGrads], lr: f64) {
        assert_eq!(grads.len(), self.layers.len());
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            layer.apply_sgd(g, lr);
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    /// Parameters flattened front to back, weights row-major then bias.
    pub fn param_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weights.data);
            if let Some(b) = &l.bias {
                out.extend_from_slice(b);
            }
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "parameter vector length mismatch");
        let mut off = 0;
        for l in &mut self.layers {
            let n = l.weights.data.len();
            l.weights.data.copy_from_slice(&flat[off..off + n]);
            off += n;
            if let Some(b) = &mut l.bias {
                let len = b.len();
                b.copy_from_slice(&flat[off..off + len]);
                off += len;
            }
        }
    }

    /// Adds a flattened delta onto the parameters.
    pub fn add_params(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.param_count());
        let mut off = 0;
        for l in &mut self.layers {
            for w in &mut l.weights.data {
                *w += delta[off];
                off += 1;
            }
            if let Some(b) = &mut l.bias {
                for w in b.iter_mut() {
                    *w += delta[off];
                    off += 1;
                }
            }
        }
    }

    /// Flattens per-layer gradients in the same order as [`Mlp::param_vec`].
    pub fn flatten_grads(&self, grads: &[DenseGrads]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in grads {
            out.extend_from_slice(&g.d_weights.data);
            if let Some(db) = &g.d_bias {
                out.extend_from_slice(db);
            }
        }
        out
    }
}
