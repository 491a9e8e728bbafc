//! Fully connected layers and the multilayer perceptron built from them.

use serde::{Deserialize, Serialize};

use super::{Activation, Matrix, NnError};
use crate::rng::SplitMix64;

/// One dense layer: `post = activation(W x + b)` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Seeded uniform init in [-sqrt(6/(in+out)), +sqrt(6/(in+out))], biases
    /// zero.
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut SplitMix64) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.uniform(-bound, bound)).collect();
        DenseLayer {
            w: Matrix::from_vec(out_dim, in_dim, data).expect("consistent dims"),
            b: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows()
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Everything recorded during a forward pass that backward needs.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    /// Pre-activations per layer.
    pub pre: Vec<Vec<f64>>,
    /// Post-activations per layer; `post.last()` is the network output.
    pub post: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }

    /// Pre-activation of the final layer (the logits of a softmax head).
    pub fn logits(&self) -> &[f64] {
        self.pre.last().map(|v| v.as_slice()).unwrap_or(&self.input)
    }
}

/// Gradient of a scalar loss with respect to every parameter of an [`Mlp`];
/// shapes are congruent with the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGradients {
            weights: net.layers.iter().map(|l| Matrix::zeros(l.out_dim(), l.in_dim())).collect(),
            biases: net.layers.iter().map(|l| vec![0.0; l.out_dim()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &MlpGradients, scale: f64) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += scale * y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for w in &mut self.weights {
            for x in w.data_mut() {
                *x *= factor;
            }
        }
        for b in &mut self.biases {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    /// Flattens in the same order as [`Mlp::flat_params`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn is_all_zero(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| *v == 0.0))
            && self.biases.iter().all(|b| b.iter().all(|v| *v == 0.0))
    }
}

impl Mlp {
    /// Builds a stack from `dims = [in, h1, ..., out]` and one activation per
    /// layer (`activations.len() == dims.len() - 1`).
    pub fn new(dims: &[usize], activations: &[Activation], seed: u64) -> Self {
        assert_eq!(activations.len() + 1, dims.len(), "one activation per layer");
        let mut rng = SplitMix64::new(seed);
        let layers = dims
            .windows(2)
            .zip(activations)
            .map(|(d, act)| DenseLayer::new(d[0], d[1], *act, &mut rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    /// Plain forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>, NnError> {
        let mut trace = self.forward_trace(input)?;
        Ok(trace.post.pop().unwrap_or(trace.input))
    }

    /// Forward pass that records pre/post activations for a later backward.
    pub fn forward_trace(&self, input: &[f64]) -> Result<MlpTrace, NnError> {
        if input.len() != self.in_dim() {
            return Err(NnError::ShapeMismatch {
                context: "Mlp::forward",
                expected: self.in_dim(),
                got: input.len(),
            });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let mut z = layer.w.matvec(x);
            for (zi, bi) in z.iter_mut().zip(&layer.b) {
                *zi += bi;
            }
            let a = layer.activation.apply(&z);
            pre.push(z);
            post.push(a);
            x = post.last().unwrap();
        }
        Ok(MlpTrace { input: input.to_vec(), pre, post })
    }

    /// Reverse pass from an upstream gradient at the network *output*
    /// (post-activation of the last layer). Returns parameter gradients and
    /// the gradient with respect to the input.
    pub fn backward(&self, trace: &MlpTrace, d_output: &[f64]) -> (MlpGradients, Vec<f64>) {
        let n = self.layers.len();
        let last = &self.layers[n - 1];
        let d_pre_last =
            last.activation.backprop(&trace.pre[n - 1], &trace.post[n - 1], d_output);
        self.backward_inner(trace, d_pre_last)
    }

    /// Reverse pass from an upstream gradient at the last layer's
    /// *pre-activation* (its logits). Lets losses that are naturally expressed
    /// in logit space (log-softmax terms) skip the softmax Jacobian.
    pub fn backward_from_logits(&self, trace: &MlpTrace, d_logits: &[f64]) -> (MlpGradients, Vec<f64>) {
        self.backward_inner(trace, d_logits.to_vec())
    }

    fn backward_inner(&self, trace: &MlpTrace, mut d_pre: Vec<f64>) -> (MlpGradients, Vec<f64>) {
        let n = self.layers.len();
        let mut grads = MlpGradients::zeros_like(self);
        for l in (0..n).rev() {
            let layer = &self.layers[l];
            let prev: &[f64] = if l == 0 { &trace.input } else { &trace.post[l - 1] };
            grads.weights[l].add_outer(&d_pre, prev);
            grads.biases[l].copy_from_slice(&d_pre);
            let d_prev_post = layer.w.matvec_transposed(&d_pre);
            if l > 0 {
                d_pre = self.layers[l - 1].activation.backprop(
                    &trace.pre[l - 1],
                    &trace.post[l - 1],
                    &d_prev_post,
                );
            } else {
                d_pre = d_prev_post;
            }
        }
        // After the loop d_pre holds the gradient w.r.t. the input.
        (grads, d_pre)
    }

    /// Parameters flattened layer by layer, W row-major then b.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.w.data());
            out.extend_from_slice(&layer.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NnError> {
        let expected: usize = self.num_params();
        if params.len() != expected {
            return Err(NnError::ShapeMismatch {
                context: "Mlp::set_flat_params",
                expected,
                got: params.len(),
            });
        }
        let mut off = 0;
        for layer in &mut self.layers {
            let wn = layer.w.data().len();
            layer.w.data_mut().copy_from_slice(&params[off..off + wn]);
            off += wn;
            let bn = layer.b.len();
            layer.b.copy_from_slice(&params[off..off + bn]);
            off += bn;
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data().len() + l.b.len()).sum()
    }
}
