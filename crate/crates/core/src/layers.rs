//! Non-convolutional layers and their backward passes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_output` where the input was strictly positive; the
/// subgradient at zero is zero.
pub fn relu_backward(input: &Tensor, grad_output: &Tensor) -> Result<Tensor> {
    grad_output.expect_shape(input.shape(), "relu grad_output")?;
    let data = input
        .data()
        .iter()
        .zip(grad_output.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Output of a 2×2 / stride 2 max pool, with the flat input index that
/// produced each output element.
#[derive(Clone, Debug)]
pub struct Pooled {
    pub output: Tensor,
    pub argmax: Vec<usize>,
}

/// 2×2 max pooling with stride 2. Among tied maxima the lowest linear
/// index wins.
pub fn maxpool2d(input: &Tensor) -> Result<Pooled> {
    let [n, c, h, w] = input.shape();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!(
            "2x2 max pool needs even spatial extents, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut output = Tensor::zeros([n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(output.len());
    let src = input.data();
    let dst = output.data_mut();
    let mut o = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let top = base + 2 * i * w + 2 * j;
                let mut best = top;
                for idx in [top + 1, top + w, top + w + 1] {
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[o] = src[best];
                argmax.push(best);
                o += 1;
            }
        }
    }
    Ok(Pooled { output, argmax })
}

pub fn maxpool2d_backward(input_shape: [usize; 4], argmax: &[usize], grad_output: &Tensor) -> Result<Tensor> {
    if argmax.len() != grad_output.len() {
        return Err(Error::Shape(format!(
            "max pool backward: {} routing indices for {} gradients",
            argmax.len(),
            grad_output.len()
        )));
    }
    let mut grad = Tensor::zeros(input_shape);
    let g = grad.data_mut();
    for (&idx, &d) in argmax.iter().zip(grad_output.data()) {
        g[idx] += d;
    }
    Ok(grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub epsilon: f64,
    /// Weight of the previous running statistic in the moving average.
    pub momentum: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            epsilon: 1e-5,
            momentum: 0.9,
        }
    }
}

/// Running mean/variance for one batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BnState {
    pub fn new(channels: usize) -> Self {
        BnState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn update(&mut self, cache: &BnCache, momentum: f64) {
        for (r, &m) in self.running_mean.iter_mut().zip(&cache.mean) {
            *r = momentum * *r + (1.0 - momentum) * m;
        }
        for (r, &v) in self.running_var.iter_mut().zip(&cache.var) {
            *r = momentum * *r + (1.0 - momentum) * v;
        }
    }
}

/// Saved batch statistics and normalized activations from a train-mode
/// forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub normalized: Tensor,
}

fn check_affine(input: &Tensor, gamma: &[f64], beta: &[f64]) -> Result<()> {
    if gamma.len() != input.channels() || beta.len() != input.channels() {
        return Err(Error::Shape(format!(
            "batchnorm over {} channels got gamma of {} and beta of {}",
            input.channels(),
            gamma.len(),
            beta.len()
        )));
    }
    Ok(())
}

/// Train-mode batchnorm: normalizes with the per-channel batch mean and
/// (biased) batch variance.
pub fn batchnorm2d_train(input: &Tensor, gamma: &[f64], beta: &[f64], epsilon: f64) -> Result<(Tensor, BnCache)> {
    check_affine(input, gamma, beta)?;
    let [n, c, _, _] = input.shape();
    let m = n * input.plane_len();
    if m == 0 {
        return Err(Error::Invalid("batchnorm over an empty batch".into()));
    }
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let sum: f64 = (0..n).map(|b| input.plane(b, ch).iter().sum::<f64>()).sum();
        let mu = sum / m as f64;
        let sq: f64 = (0..n)
            .map(|b| input.plane(b, ch).iter().map(|v| (v - mu) * (v - mu)).sum::<f64>())
            .sum();
        mean[ch] = mu;
        var[ch] = sq / m as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut normalized = Tensor::zeros(input.shape());
    let mut output = Tensor::zeros(input.shape());
    for b in 0..n {
        for ch in 0..c {
            let (mu, is, g, bt) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            let src = input.plane(b, ch);
            for (xh, &v) in normalized.plane_mut(b, ch).iter_mut().zip(src) {
                *xh = (v - mu) * is;
            }
            for (o, &xh) in output.plane_mut(b, ch).iter_mut().zip(normalized.plane(b, ch)) {
                *o = g * xh + bt;
            }
        }
    }
    Ok((
        output,
        BnCache {
            mean,
            var,
            inv_std,
            normalized,
        },
    ))
}

pub fn batchnorm2d_eval(input: &Tensor, gamma: &[f64], beta: &[f64], state: &BnState, epsilon: f64) -> Result<Tensor> {
    check_affine(input, gamma, beta)?;
    if state.running_mean.len() != input.channels() || state.running_var.len() != input.channels() {
        return Err(Error::Shape(
            "batchnorm running statistics do not match channel count".into(),
        ));
    }
    let mut output = input.clone();
    for b in 0..input.batch() {
        for ch in 0..input.channels() {
            let scale = gamma[ch] / (state.running_var[ch] + epsilon).sqrt();
            let shift = beta[ch] - state.running_mean[ch] * scale;
            for v in output.plane_mut(b, ch) {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(output)
}

/// Batchnorm in either mode; train mode folds the batch statistics into
/// `state`.
pub fn batchnorm2d(
    input: &Tensor,
    gamma: &[f64],
    beta: &[f64],
    state: &mut BnState,
    mode: Mode,
    config: BatchNormConfig,
) -> Result<Tensor> {
    match mode {
        Mode::Train => {
            let (out, cache) = batchnorm2d_train(input, gamma, beta, config.epsilon)?;
            state.update(&cache, config.momentum);
            Ok(out)
        }
        Mode::Eval => batchnorm2d_eval(input, gamma, beta, state, config.epsilon),
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

pub fn batchnorm2d_train_backward(cache: &BnCache, gamma: &[f64], grad_output: &Tensor) -> Result<BnGrads> {
    let shape = cache.normalized.shape();
    grad_output.expect_shape(shape, "batchnorm grad_output")?;
    let [n, c, _, _] = shape;
    let m = (n * cache.normalized.plane_len()) as f64;
    let mut grad_input = Tensor::zeros(shape);
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_dy, mut sum_dy_xh) = (0.0, 0.0);
        for b in 0..n {
            for (&dy, &xh) in grad_output.plane(b, ch).iter().zip(cache.normalized.plane(b, ch)) {
                sum_dy += dy;
                sum_dy_xh += dy * xh;
            }
        }
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let k = gamma[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            let dy = grad_output.plane(b, ch);
            let xh = cache.normalized.plane(b, ch);
            for ((dx, &d), &x) in grad_input.plane_mut(b, ch).iter_mut().zip(dy).zip(xh) {
                *dx = k * (m * d - sum_dy - x * sum_dy_xh);
            }
        }
    }
    Ok(BnGrads {
        input: grad_input,
        gamma: dgamma,
        beta: dbeta,
    })
}

/// Batched affine map `out = Wᵀ·x + b` for each of `batch` rows of
/// `input`. `weights` is `in_dim × out_dim`, row-major.
pub fn dense(input: &[f64], batch: usize, weights: &[f64], bias: &[f64]) -> Result<Vec<f64>> {
    let (in_dim, out_dim) = dense_dims(input, batch, weights, bias)?;
    let mut out = Vec::with_capacity(batch * out_dim);
    for row in input.chunks_exact(in_dim) {
        let start = out.len();
        out.extend_from_slice(bias);
        let dst = &mut out[start..];
        for (&x, wrow) in row.iter().zip(weights.chunks_exact(out_dim)) {
            if x == 0.0 {
                continue;
            }
            for (d, &w) in dst.iter_mut().zip(wrow) {
                *d += x * w;
            }
        }
    }
    Ok(out)
}

fn dense_dims(input: &[f64], batch: usize, weights: &[f64], bias: &[f64]) -> Result<(usize, usize)> {
    let out_dim = bias.len();
    if batch == 0 || out_dim == 0 || !input.len().is_multiple_of(batch) {
        return Err(Error::Shape(format!(
            "dense: {} inputs cannot form {batch} rows with {out_dim} outputs",
            input.len()
        )));
    }
    let in_dim = input.len() / batch;
    if weights.len() != in_dim * out_dim {
        return Err(Error::Shape(format!(
            "dense: input width {in_dim} and output width {out_dim} need {} weights, got {}",
            in_dim * out_dim,
            weights.len()
        )));
    }
    Ok((in_dim, out_dim))
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn dense_backward(
    input: &[f64],
    batch: usize,
    weights: &[f64],
    bias: &[f64],
    grad_output: &[f64],
) -> Result<DenseGrads> {
    let (in_dim, out_dim) = dense_dims(input, batch, weights, bias)?;
    if grad_output.len() != batch * out_dim {
        return Err(Error::Shape(format!(
            "dense backward: expected {} output gradients, got {}",
            batch * out_dim,
            grad_output.len()
        )));
    }
    let mut gi = vec![0.0; input.len()];
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; out_dim];
    for ((row, dy), gi_row) in input
        .chunks_exact(in_dim)
        .zip(grad_output.chunks_exact(out_dim))
        .zip(gi.chunks_exact_mut(in_dim))
    {
        for (b, &d) in gb.iter_mut().zip(dy) {
            *b += d;
        }
        for (i, (&x, wrow)) in row.iter().zip(weights.chunks_exact(out_dim)).enumerate() {
            let gw_row = &mut gw[i * out_dim..(i + 1) * out_dim];
            let mut acc = 0.0;
            for ((g, &w), &d) in gw_row.iter_mut().zip(wrow).zip(dy) {
                *g += x * d;
                acc += w * d;
            }
            gi_row[i] = acc;
        }
    }
    Ok(DenseGrads {
        input: gi,
        weights: gw,
        bias: gb,
    })
}

/// Mean over H×W, producing an `(N, C, 1, 1)` tensor.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, _, _] = input.shape();
    let area = input.plane_len() as f64;
    Tensor::from_fn([n, c, 1, 1], |[b, ch, _, _]| {
        input.plane(b, ch).iter().sum::<f64>() / area
    })
}

pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_output: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input_shape;
    grad_output.expect_shape([n, c, 1, 1], "global average pool grad_output")?;
    let area = (h * w) as f64;
    let mut grad = Tensor::zeros(input_shape);
    for b in 0..n {
        for ch in 0..c {
            let g = grad_output.get(b, ch, 0, 0) / area;
            grad.plane_mut(b, ch).fill(g);
        }
    }
    Ok(grad)
}
