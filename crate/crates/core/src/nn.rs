//! Minimal float64 convolutional building blocks with hand-written backward passes.
//!
//! Every network keeps its parameters in one flat `Vec<f64>` so optimizers,
//! checkpoints and gradient checks can treat it as a plain vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("expected input of shape {expected:?}, got {got:?}")]
    Input {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("parameter vector has length {got}, network needs {expected}")]
    Params { expected: usize, got: usize },
    #[error("invalid network: {0}")]
    Spec(String),
}

/// Dense channel-major `(channels, height, width)` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - kernel) / stride + 1
}

/// One 2-D convolution; weights are laid out `[out][in][ky][kx]` followed by `[out]` biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub offset: usize,
}

impl Conv2d {
    pub fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn output_size(&self, height: usize, width: usize) -> (usize, usize) {
        (
            conv_out(height, self.kernel, self.stride, self.pad),
            conv_out(width, self.kernel, self.stride, self.pad),
        )
    }

    /// Unfold `input` into a `[in_channels * k * k, oh * ow]` matrix.
    fn im2col(&self, input: &Tensor3, oh: usize, ow: usize) -> Vec<f64> {
        let (h, w, k) = (input.height, input.width, self.kernel);
        let plane = oh * ow;
        let mut cols = vec![0.0; self.in_channels * k * k * plane];
        for ic in 0..self.in_channels {
            let src = input.plane(ic);
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((ic * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let in_row = &src[iy as usize * w..][..w];
                        let out_row = &mut row[oy * ow..][..ow];
                        for (ox, o) in out_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *o = in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Scatter-add a `[in_channels * k * k, oh * ow]` matrix back onto an image.
    fn col2im(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Tensor3 {
        let k = self.kernel;
        let plane = oh * ow;
        let mut out = Tensor3::zeros(self.in_channels, h, w);
        for ic in 0..self.in_channels {
            let dst = &mut out.data[ic * h * w..][..h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((ic * k + ky) * k + kx) * plane..][..plane];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let d_row = &mut dst[iy as usize * w..][..w];
                        for (ox, v) in row[oy * ow..][..ow].iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                d_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, params: &[f64], input: &Tensor3) -> Tensor3 {
        debug_assert_eq!(input.channels, self.in_channels);
        let (oh, ow) = self.output_size(input.height, input.width);
        let kk = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_len()];
        let mut out = Tensor3::zeros(self.out_channels, oh, ow);
        for (oc, b) in bias.iter().enumerate() {
            out.data[oc * plane..(oc + 1) * plane].fill(*b);
        }
        let cols = self.im2col(input, oh, ow);
        gemm(self.out_channels, kk, plane, weights, false, &cols, false, &mut out.data);
        out
    }

    /// Accumulates parameter gradients into `param_grad` (when given) and returns
    /// the gradient with respect to `input` (when `want_input` is set).
    pub fn backward(
        &self,
        params: &[f64],
        input: &Tensor3,
        grad_out: &Tensor3,
        param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Tensor3> {
        let (h, w) = (input.height, input.width);
        let (oh, ow) = (grad_out.height, grad_out.width);
        let kk = self.in_channels * self.kernel * self.kernel;
        let plane = oh * ow;
        let wlen = self.weight_len();
        let weights = &params[self.offset..self.offset + wlen];

        if let Some(pg) = param_grad {
            let (gw, gb) = pg[self.offset..self.offset + self.param_len()].split_at_mut(wlen);
            for (oc, g) in gb.iter_mut().enumerate() {
                *g += grad_out.data[oc * plane..(oc + 1) * plane].iter().sum::<f64>();
            }
            let cols = self.im2col(input, oh, ow);
            gemm(self.out_channels, plane, kk, &grad_out.data, false, &cols, true, gw);
        }

        if !want_input {
            return None;
        }
        let mut gcols = vec![0.0; kk * plane];
        gemm(kk, self.out_channels, plane, weights, true, &grad_out.data, false, &mut gcols);
        Some(self.col2im(&gcols, h, w, oh, ow))
    }
}

/// `c += op(a) * op(b)` for row-major `op(a)`: `m x k`, `op(b)`: `k x n`, `c`: `m x n`.
/// `a_t` / `b_t` read the stored matrix transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the bounds above cover every element addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Fully connected layer, `[out][in]` weights followed by `[out]` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub params: Vec<f64>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let mut params = vec![0.0; in_dim * out_dim + out_dim];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (in_dim + out_dim).max(1) as f64).sqrt();
        for v in params[..in_dim * out_dim].iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
        Self { in_dim, out_dim, params }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let b = &self.params[self.in_dim * self.out_dim..];
        (0..self.out_dim)
            .map(|o| {
                let row = &self.params[o * self.in_dim..(o + 1) * self.in_dim];
                b[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates into `grad` and returns the input gradient.
    pub fn backward(&self, x: &[f64], grad_out: &[f64], grad: &mut [f64]) -> Vec<f64> {
        let n = self.in_dim * self.out_dim;
        let mut gin = vec![0.0; self.in_dim];
        for (o, &g) in grad_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[n + o] += g;
            let row = &self.params[o * self.in_dim..(o + 1) * self.in_dim];
            let grow = &mut grad[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                gin[i] += g * row[i];
            }
        }
        gin
    }
}

/// One layer of a [`ConvNetSpec`]: a 3x3 convolution with optional ReLU.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default = "yes")]
    pub relu: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ConvLayerSpec {
    pub fn new(out_channels: usize, stride: usize) -> Self {
        Self {
            out_channels,
            stride,
            relu: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub in_channels: usize,
    pub layers: Vec<ConvLayerSpec>,
}

/// Activations recorded by [`ConvNet::forward`]; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ConvTrace {
    pub acts: Vec<Tensor3>,
}

impl ConvTrace {
    pub fn output(&self, layer: usize) -> &Tensor3 {
        &self.acts[layer + 1]
    }

    pub fn last(&self) -> &Tensor3 {
        self.acts.last().expect("trace holds the input")
    }
}

/// A plain chain of 3x3 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub spec: ConvNetSpec,
    pub convs: Vec<Conv2d>,
    pub params: Vec<f64>,
}

impl ConvNet {
    /// Build with uniform fan-in (He) initialization drawn from `seed`.
    pub fn new(spec: ConvNetSpec, seed: u64) -> Result<Self, ShapeError> {
        let mut net = Self::zeroed(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &net.convs {
            let bound = (6.0 / conv.fan_in() as f64).sqrt();
            for v in net.params[conv.offset..conv.offset + conv.weight_len()].iter_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        Ok(net)
    }

    pub fn zeroed(spec: ConvNetSpec) -> Result<Self, ShapeError> {
        if spec.in_channels == 0 || spec.layers.is_empty() {
            return Err(ShapeError::Spec("network needs input channels and at least one layer".into()));
        }
        let mut convs = Vec::with_capacity(spec.layers.len());
        let mut offset = 0;
        let mut in_c = spec.in_channels;
        for l in &spec.layers {
            if l.out_channels == 0 || l.stride == 0 {
                return Err(ShapeError::Spec("layer channels and stride must be positive".into()));
            }
            let conv = Conv2d {
                in_channels: in_c,
                out_channels: l.out_channels,
                kernel: 3,
                stride: l.stride,
                pad: 1,
                offset,
            };
            offset += conv.param_len();
            in_c = l.out_channels;
            convs.push(conv);
        }
        Ok(Self {
            spec,
            convs,
            params: vec![0.0; offset],
        })
    }

    pub fn with_params(spec: ConvNetSpec, params: Vec<f64>) -> Result<Self, ShapeError> {
        let mut net = Self::zeroed(spec)?;
        if params.len() != net.params.len() {
            return Err(ShapeError::Params {
                expected: net.params.len(),
                got: params.len(),
            });
        }
        net.params = params;
        Ok(net)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn out_channels(&self) -> usize {
        self.convs.last().map(|c| c.out_channels).unwrap_or(0)
    }

    /// Output shape of every layer for an input of `height x width`.
    pub fn layer_shapes(&self, height: usize, width: usize) -> Vec<(usize, usize, usize)> {
        let (mut h, mut w) = (height, width);
        self.convs
            .iter()
            .map(|c| {
                let (oh, ow) = c.output_size(h, w);
                h = oh;
                w = ow;
                (c.out_channels, oh, ow)
            })
            .collect()
    }

    pub fn forward(&self, input: &Tensor3) -> ConvTrace {
        let mut acts = Vec::with_capacity(self.convs.len() + 1);
        acts.push(input.clone());
        for (conv, spec) in self.convs.iter().zip(&self.spec.layers) {
            let mut out = conv.forward(&self.params, acts.last().unwrap());
            if spec.relu {
                for v in out.data.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            acts.push(out);
        }
        ConvTrace { acts }
    }

    /// Back-propagate gradients injected at layer outputs.
    ///
    /// `output_grads[i]` is the gradient with respect to the (post-activation)
    /// output of layer `i`. Returns the input gradient when `want_input` is set.
    pub fn backward(
        &self,
        trace: &ConvTrace,
        mut output_grads: Vec<Option<Tensor3>>,
        mut param_grad: Option<&mut [f64]>,
        want_input: bool,
    ) -> Option<Tensor3> {
        assert_eq!(output_grads.len(), self.convs.len());
        let mut carry: Option<Tensor3> = None;
        for i in (0..self.convs.len()).rev() {
            let g = match (carry.take(), output_grads[i].take()) {
                (Some(mut a), Some(b)) => {
                    a.add_assign(&b);
                    Some(a)
                }
                (a, b) => a.or(b),
            };
            let Some(mut g) = g else {
                continue;
            };
            if self.spec.layers[i].relu {
                let out = trace.output(i);
                for (gv, ov) in g.data.iter_mut().zip(&out.data) {
                    if *ov <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let need_input = i > 0 || want_input;
            carry = self.convs[i].backward(&self.params, &trace.acts[i], &g, param_grad.as_deref_mut(), need_input);
        }
        if want_input {
            Some(carry.unwrap_or_else(|| {
                let x = &trace.acts[0];
                Tensor3::zeros(x.channels, x.height, x.width)
            }))
        } else {
            None
        }
    }
}

pub fn global_average_pool(t: &Tensor3) -> Vec<f64> {
    let n = (t.height * t.width) as f64;
    (0..t.channels).map(|c| t.plane(c).iter().sum::<f64>() / n).collect()
}

pub fn global_average_pool_backward(grad: &[f64], channels: usize, height: usize, width: usize) -> Tensor3 {
    let n = (height * width) as f64;
    let mut out = Tensor3::zeros(channels, height, width);
    let plane = height * width;
    for c in 0..channels {
        out.data[c * plane..(c + 1) * plane].fill(grad[c] / n);
    }
    out
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    logits.iter().map(|v| v - lse).collect()
}

/// RMSProp with L2 weight decay folded into the gradient.
///
/// The running square average starts at zero and is bias-corrected by
/// `1 - alpha^t`, so early steps are not inflated by the empty average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmsProp {
    pub alpha: f64,
    pub eps: f64,
    pub weight_decay: f64,
    square_avg: Vec<f64>,
    steps: i32,
}

impl RmsProp {
    pub fn new(len: usize, alpha: f64, eps: f64, weight_decay: f64) -> Self {
        Self {
            alpha,
            eps,
            weight_decay,
            square_avg: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.square_avg.len());
        self.steps = self.steps.saturating_add(1);
        let correction = 1.0 - self.alpha.powi(self.steps);
        for ((p, &g), s) in params.iter_mut().zip(grads).zip(self.square_avg.iter_mut()) {
            let g = g + self.weight_decay * *p;
            *s = self.alpha * *s + (1.0 - self.alpha) * g * g;
            *p -= lr * g / ((*s / correction).sqrt() + self.eps);
        }
    }
}

/// Step-decay learning-rate schedule over 1-based epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub base_lr: f64,
    /// The rate is multiplied by `gamma` once each listed epoch has completed.
    pub drops: Vec<usize>,
    pub gamma: f64,
}

impl StepSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let n = self.drops.iter().filter(|&&d| epoch > d).count();
        self.base_lr * self.gamma.powi(n as i32)
    }
}
