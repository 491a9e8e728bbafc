//! Minimal dense/convolutional network engine with exact reverse-mode
//! gradients.
//!
//! Everything is 64-bit: the networks here are small enough that precision is
//! cheaper than chasing 32-bit noise through gradient checks. Backward passes
//! return gradients for every parameter *and* for the network input; the
//! input path is load-bearing because the generalization term of the upgraded
//! loss differentiates a frozen predictor with respect to its input features.

mod adam;
mod conv;
mod dense;
mod matrix;

pub use adam::AdamState;
pub use conv::{ConvGradients, ConvLayer, ConvTrace, MeanPool, Tensor3};
pub use dense::{DenseLayer, Mlp, MlpGradients, MlpTrace};
pub use matrix::Matrix;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch { context: &'static str, expected: usize, got: usize },
}

/// Pointwise nonlinearity applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Softmax,
    Identity,
}

impl Activation {
    pub(crate) fn apply(self, pre: &[f64]) -> Vec<f64> {
        match self {
            Activation::Identity => pre.to_vec(),
            Activation::Tanh => pre.iter().map(|z| z.tanh()).collect(),
            Activation::Relu => pre.iter().map(|z| z.max(0.0)).collect(),
            Activation::Softmax => softmax(pre),
        }
    }

    /// Converts an upstream gradient at the activation output into a gradient
    /// at the pre-activation. `pre` and `post` come from the forward trace.
    pub(crate) fn backprop(self, pre: &[f64], post: &[f64], d_post: &[f64]) -> Vec<f64> {
        match self {
            Activation::Identity => d_post.to_vec(),
            Activation::Tanh => {
                post.iter().zip(d_post).map(|(a, g)| g * (1.0 - a * a)).collect()
            }
            Activation::Relu => pre
                .iter()
                .zip(d_post)
                .map(|(z, g)| if *z > 0.0 { *g } else { 0.0 })
                .collect(),
            Activation::Softmax => {
                // d pre_k = p_k (d_post_k - sum_j d_post_j p_j)
                let dot: f64 = post.iter().zip(d_post).map(|(p, g)| p * g).sum();
                post.iter().zip(d_post).map(|(p, g)| p * (g - dot)).collect()
            }
        }
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Numerically stable log-softmax (max subtraction).
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - max - log_sum).collect()
}
