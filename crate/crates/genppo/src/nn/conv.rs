//! 2-D convolution (cross-correlation) layers and adaptive mean pooling.

use serde::{Deserialize, Serialize};

use super::{Activation, NnError};
use crate::rng::SplitMix64;

/// Channel-major (CHW) 3-D tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Tensor3 { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self, NnError> {
        if data.len() != channels * height * width {
            return Err(NnError::ShapeMismatch {
                context: "Tensor3::from_vec",
                expected: channels * height * width,
                got: data.len(),
            });
        }
        Ok(Tensor3 { channels, height, width, data })
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    #[inline]
    fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] += v;
    }
}

/// Convolution layer with cross-correlation semantics and zero padding that
/// preserves spatial size at stride 1. Kernels are odd-sized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub out_ch: usize,
    pub in_ch: usize,
    pub kh: usize,
    pub kw: usize,
    /// Flattened `out_ch x in_ch x kh x kw`.
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub activation: Activation,
}

/// Forward record for one conv layer.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    pub input: Tensor3,
    pub pre: Tensor3,
    pub post: Tensor3,
}

/// Parameter gradients of a conv layer, congruent with its kernels and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients {
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        activation: Activation,
        rng: &mut SplitMix64,
    ) -> Self {
        assert!(kh % 2 == 1 && kw % 2 == 1, "kernel sides must be odd");
        assert!(stride >= 1);
        assert!(activation != Activation::Softmax, "softmax is not a spatial activation");
        let fan_in = in_ch * kh * kw;
        let fan_out = out_ch * kh * kw;
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let kernels = (0..out_ch * in_ch * kh * kw).map(|_| rng.uniform(-bound, bound)).collect();
        ConvLayer { out_ch, in_ch, kh, kw, kernels, bias: vec![0.0; out_ch], stride, activation }
    }

    #[inline]
    fn kernel_at(&self, o: usize, i: usize, dy: usize, dx: usize) -> f64 {
        self.kernels[((o * self.in_ch + i) * self.kh + dy) * self.kw + dx]
    }

    pub fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        ((h + 2 * ph - self.kh) / self.stride + 1, (w + 2 * pw - self.kw) / self.stride + 1)
    }

    pub fn forward_trace(&self, input: &Tensor3) -> Result<ConvTrace, NnError> {
        if input.channels != self.in_ch {
            return Err(NnError::ShapeMismatch {
                context: "ConvLayer::forward",
                expected: self.in_ch,
                got: input.channels,
            });
        }
        let (h, w) = (input.height, input.width);
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let (oh, ow) = self.out_dims(h, w);
        let mut pre = Tensor3::zeros(self.out_ch, oh, ow);
        for o in 0..self.out_ch {
            for y in 0..oh {
                for x in 0..ow {
                    let mut acc = self.bias[o];
                    for i in 0..self.in_ch {
                        for dy in 0..self.kh {
                            let sy = (y * self.stride + dy) as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..self.kw {
                                let sx = (x * self.stride + dx) as isize - pw as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                acc += self.kernel_at(o, i, dy, dx)
                                    * input.get(i, sy as usize, sx as usize);
                            }
                        }
                    }
                    pre.set(o, y, x, acc);
                }
            }
        }
        let post_data = self.activation.apply(&pre.data);
        let post = Tensor3 { channels: self.out_ch, height: oh, width: ow, data: post_data };
        Ok(ConvTrace { input: input.clone(), pre, post })
    }

    /// Gradients of a scalar loss w.r.t. kernels, bias and input, given the
    /// upstream gradient at the layer output (post-activation).
    pub fn backward(&self, trace: &ConvTrace, d_post: &Tensor3) -> (ConvGradients, Tensor3) {
        let d_pre_data = self.activation.backprop(&trace.pre.data, &trace.post.data, &d_post.data);
        let d_pre = Tensor3 {
            channels: trace.pre.channels,
            height: trace.pre.height,
            width: trace.pre.width,
            data: d_pre_data,
        };
        let (h, w) = (trace.input.height, trace.input.width);
        let (ph, pw) = ((self.kh - 1) / 2, (self.kw - 1) / 2);
        let mut grads = ConvGradients {
            kernels: vec![0.0; self.kernels.len()],
            bias: vec![0.0; self.out_ch],
        };
        let mut d_input = Tensor3::zeros(self.in_ch, h, w);
        for o in 0..self.out_ch {
            for y in 0..d_pre.height {
                for x in 0..d_pre.width {
                    let g = d_pre.get(o, y, x);
                    if g == 0.0 {
                        continue;
                    }
                    grads.bias[o] += g;
                    for i in 0..self.in_ch {
                        for dy in 0..self.kh {
                            let sy = (y * self.stride + dy) as isize - ph as isize;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for dx in 0..self.kw {
                                let sx = (x * self.stride + dx) as isize - pw as isize;
                                if sx < 0 || sx >= w as isize {
                                    continue;
                                }
                                let idx = ((o * self.in_ch + i) * self.kh + dy) * self.kw + dx;
                                grads.kernels[idx] += g * trace.input.get(i, sy as usize, sx as usize);
                                d_input.add(i, sy as usize, sx as usize, g * self.kernel_at(o, i, dy, dx));
                            }
                        }
                    }
                }
            }
        }
        (grads, d_input)
    }

    pub fn num_params(&self) -> usize {
        self.kernels.len() + self.bias.len()
    }
}

/// Adaptive mean pooling to a fixed output grid. Cells partition the input
/// when it is at least as large as the grid; smaller inputs are sampled with
/// repetition so the output size is always the same.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeanPool {
    pub out_h: usize,
    pub out_w: usize,
}

impl MeanPool {
    fn cell(range_len: usize, cells: usize, i: usize) -> (usize, usize) {
        let start = i * range_len / cells;
        let mut end = (i + 1) * range_len / cells;
        if end <= start {
            end = start + 1;
        }
        (start, end.min(range_len).max(start + 1))
    }

    pub fn forward(&self, input: &Tensor3) -> Tensor3 {
        let mut out = Tensor3::zeros(input.channels, self.out_h, self.out_w);
        for c in 0..input.channels {
            for i in 0..self.out_h {
                let (r0, r1) = Self::cell(input.height, self.out_h, i);
                for j in 0..self.out_w {
                    let (c0, c1) = Self::cell(input.width, self.out_w, j);
                    let mut acc = 0.0;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            acc += input.get(c, y, x);
                        }
                    }
                    out.set(c, i, j, acc / ((r1 - r0) * (c1 - c0)) as f64);
                }
            }
        }
        out
    }

    pub fn backward(&self, d_out: &Tensor3, in_h: usize, in_w: usize) -> Tensor3 {
        let mut d_in = Tensor3::zeros(d_out.channels, in_h, in_w);
        for c in 0..d_out.channels {
            for i in 0..self.out_h {
                let (r0, r1) = Self::cell(in_h, self.out_h, i);
                for j in 0..self.out_w {
                    let (c0, c1) = Self::cell(in_w, self.out_w, j);
                    let share = d_out.get(c, i, j) / ((r1 - r0) * (c1 - c0)) as f64;
                    for y in r0..r1 {
                        for x in c0..c1 {
                            d_in.add(c, y, x, share);
                        }
                    }
                }
            }
        }
        d_in
    }
}
