//! Standard, depthwise and pointwise 2-D convolution (cross-correlation,
//! unit stride, zero padding) with their backward passes.
//!
//! Every kernel can be run with a multiply-accumulate counter. The counter
//! is incremented by the inner loops themselves, one count per tap per
//! output element; taps that land on zero padding are counted as MACs
//! against zero, so a "same" convolution over a D×D map costs exactly
//! `D_k²·D²` per input/output channel pair.

use serde::{Deserialize, Serialize};

use crate::cost::CostReport;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvKind {
    Standard,
    Depthwise,
    Pointwise,
}

/// Convolution weights plus geometry.
///
/// Weight layouts: standard `(Y, X, D_k, D_k)`, depthwise `(X, D_k, D_k)`,
/// pointwise `(Y, X)` (the trailing 1×1 is implicit).
#[derive(Clone, Debug, PartialEq)]
pub struct ConvKernel {
    kind: ConvKind,
    in_channels: usize,
    out_channels: usize,
    size: usize,
    stride: usize,
    padding: usize,
    weights: Vec<f64>,
}

impl ConvKernel {
    pub fn standard(out_channels: usize, in_channels: usize, size: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(ConvKind::Standard, in_channels, out_channels, size, weights)
    }

    pub fn depthwise(channels: usize, size: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(ConvKind::Depthwise, channels, channels, size, weights)
    }

    pub fn pointwise(out_channels: usize, in_channels: usize, weights: Vec<f64>) -> Result<Self> {
        Self::new(ConvKind::Pointwise, in_channels, out_channels, 1, weights)
    }

    fn new(kind: ConvKind, in_channels: usize, out_channels: usize, size: usize, weights: Vec<f64>) -> Result<Self> {
        if size == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::Config(format!(
                "{kind:?} kernel needs positive extents (in {in_channels}, out {out_channels}, size {size})"
            )));
        }
        let expected = Self::weight_len(kind, in_channels, out_channels, size);
        if weights.len() != expected {
            return Err(Error::Shape(format!(
                "{kind:?} kernel {out_channels}x{in_channels}x{size}x{size} needs {expected} weights, got {}",
                weights.len()
            )));
        }
        Ok(ConvKernel {
            kind,
            in_channels,
            out_channels,
            size,
            stride: 1,
            padding: (size - 1) / 2,
            weights,
        })
    }

    pub fn weight_len(kind: ConvKind, in_channels: usize, out_channels: usize, size: usize) -> usize {
        match kind {
            ConvKind::Standard => out_channels * in_channels * size * size,
            ConvKind::Depthwise => in_channels * size * size,
            ConvKind::Pointwise => out_channels * in_channels,
        }
    }

    /// Overrides the default "same" padding.
    pub fn with_padding(mut self, padding: usize) -> Self {
        if self.kind != ConvKind::Pointwise {
            self.padding = padding;
        }
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        if stride != 1 {
            return Err(Error::Config(format!(
                "stride {stride} unsupported; only unit stride is implemented"
            )));
        }
        self.stride = stride;
        Ok(self)
    }

    pub fn kind(&self) -> ConvKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn output_dims(&self, input: &Tensor) -> Result<(usize, usize)> {
        let span = |d: usize| (d + 2 * self.padding).checked_sub(self.size).map(|v| v + 1);
        match (span(input.height()), span(input.width())) {
            (Some(h), Some(w)) if h > 0 && w > 0 => Ok((h, w)),
            _ => Err(Error::Shape(format!(
                "{}x{} kernel with padding {} does not fit a {}x{} input",
                self.size,
                self.size,
                self.padding,
                input.height(),
                input.width()
            ))),
        }
    }

    fn check(&self, input: &Tensor, kind: ConvKind) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Shape(format!("expected a {kind:?} kernel, got {:?}", self.kind)));
        }
        if input.channels() != self.in_channels {
            return Err(Error::Shape(format!(
                "input {:?} has {} channels but the {:?} kernel ({}x{}x{}x{}) expects {}",
                input.shape(),
                input.channels(),
                self.kind,
                self.out_channels,
                self.in_channels,
                self.size,
                self.size,
                self.in_channels
            )));
        }
        Ok(())
    }
}

/// Multiply-accumulate tally, filled by the `*_counted` entry points.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub standard: u64,
    pub depthwise: u64,
    pub pointwise: u64,
}

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn report(&self) -> CostReport {
        let mut breakdown = Vec::new();
        for (kind, count) in [
            (ConvKind::Standard, self.standard),
            (ConvKind::Depthwise, self.depthwise),
            (ConvKind::Pointwise, self.pointwise),
        ] {
            if count > 0 {
                breakdown.push((kind, count));
            }
        }
        CostReport::from_breakdown(breakdown)
    }

    fn slot(&mut self, kind: ConvKind) -> &mut u64 {
        match kind {
            ConvKind::Standard => &mut self.standard,
            ConvKind::Depthwise => &mut self.depthwise,
            ConvKind::Pointwise => &mut self.pointwise,
        }
    }
}

/// Geometry of one plane-to-plane correlation.
#[derive(Clone, Copy)]
struct PlaneGeom {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    k: usize,
    pad: usize,
}

impl PlaneGeom {
    /// Output columns whose tap `q` reads inside the input row; `None`
    /// when the tap never lands inside it.
    #[inline]
    fn col_range(&self, q: usize) -> Option<(usize, usize)> {
        let j0 = self.pad.saturating_sub(q);
        let j1 = (self.w + self.pad).saturating_sub(q).min(self.ow);
        (j0 < j1).then_some((j0, j1))
    }

    /// Input row read by output row `i` through tap row `p`.
    #[inline]
    fn src_row(&self, i: usize, p: usize) -> Option<usize> {
        (i + p).checked_sub(self.pad).filter(|&r| r < self.h)
    }
}

#[inline]
fn correlate_plane<const COUNT: bool>(src: &[f64], taps: &[f64], g: PlaneGeom, dst: &mut [f64], counter: &mut u64) {
    for p in 0..g.k {
        for q in 0..g.k {
            let wt = taps[p * g.k + q];
            if COUNT {
                *counter += (g.oh * g.ow) as u64;
            }
            let Some((j0, j1)) = g.col_range(q) else { continue };
            for i in 0..g.oh {
                let Some(r) = g.src_row(i, p) else { continue };
                let s0 = r * g.w + j0 + q - g.pad;
                let src_row = &src[s0..s0 + (j1 - j0)];
                let dst_row = &mut dst[i * g.ow + j0..i * g.ow + j1];
                for (d, s) in dst_row.iter_mut().zip(src_row) {
                    *d += wt * s;
                }
            }
        }
    }
}

#[inline]
fn correlate_plane_backward(
    src: &[f64],
    taps: &[f64],
    g: PlaneGeom,
    dout: &[f64],
    dsrc: &mut [f64],
    dtaps: &mut [f64],
) {
    for p in 0..g.k {
        for q in 0..g.k {
            let wt = taps[p * g.k + q];
            let Some((j0, j1)) = g.col_range(q) else { continue };
            let mut acc = 0.0;
            for i in 0..g.oh {
                let Some(r) = g.src_row(i, p) else { continue };
                let s0 = r * g.w + j0 + q - g.pad;
                let dout_row = &dout[i * g.ow + j0..i * g.ow + j1];
                let src_row = &src[s0..s0 + (j1 - j0)];
                let dsrc_row = &mut dsrc[s0..s0 + (j1 - j0)];
                for ((ds, &s), &d) in dsrc_row.iter_mut().zip(src_row).zip(dout_row) {
                    *ds += wt * d;
                    acc += d * s;
                }
            }
            dtaps[p * g.k + q] += acc;
        }
    }
}

fn geom(input: &Tensor, kernel: &ConvKernel) -> Result<PlaneGeom> {
    let (oh, ow) = kernel.output_dims(input)?;
    Ok(PlaneGeom {
        h: input.height(),
        w: input.width(),
        oh,
        ow,
        k: kernel.size,
        pad: kernel.padding,
    })
}

fn standard_impl<const COUNT: bool>(input: &Tensor, kernel: &ConvKernel, counter: &mut u64) -> Result<Tensor> {
    kernel.check(input, ConvKind::Standard)?;
    let g = geom(input, kernel)?;
    let (xs, ys, kk) = (kernel.in_channels, kernel.out_channels, g.k * g.k);
    let mut out = Tensor::zeros([input.batch(), ys, g.oh, g.ow]);
    for n in 0..input.batch() {
        for y in 0..ys {
            let dst = out.plane_mut(n, y);
            for x in 0..xs {
                let taps = &kernel.weights[(y * xs + x) * kk..(y * xs + x + 1) * kk];
                correlate_plane::<COUNT>(input.plane(n, x), taps, g, dst, counter);
            }
        }
    }
    Ok(out)
}

fn depthwise_impl<const COUNT: bool>(input: &Tensor, kernel: &ConvKernel, counter: &mut u64) -> Result<Tensor> {
    kernel.check(input, ConvKind::Depthwise)?;
    let g = geom(input, kernel)?;
    let kk = g.k * g.k;
    let mut out = Tensor::zeros([input.batch(), input.channels(), g.oh, g.ow]);
    for n in 0..input.batch() {
        for c in 0..input.channels() {
            let taps = &kernel.weights[c * kk..(c + 1) * kk];
            correlate_plane::<COUNT>(input.plane(n, c), taps, g, out.plane_mut(n, c), counter);
        }
    }
    Ok(out)
}

fn pointwise_impl<const COUNT: bool>(input: &Tensor, kernel: &ConvKernel, counter: &mut u64) -> Result<Tensor> {
    kernel.check(input, ConvKind::Pointwise)?;
    let (xs, ys) = (kernel.in_channels, kernel.out_channels);
    let mut out = Tensor::zeros([input.batch(), ys, input.height(), input.width()]);
    let plane = input.plane_len();
    for n in 0..input.batch() {
        for y in 0..ys {
            let dst = out.plane_mut(n, y);
            for x in 0..xs {
                if COUNT {
                    *counter += plane as u64;
                }
                let wt = kernel.weights[y * xs + x];
                for (d, s) in dst.iter_mut().zip(input.plane(n, x)) {
                    *d += wt * s;
                }
            }
        }
    }
    Ok(out)
}

pub fn standard_conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    standard_impl::<false>(input, kernel, &mut 0)
}

/// Per-channel convolution: filter `x` is applied to channel `x` only.
pub fn depthwise_conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    depthwise_impl::<false>(input, kernel, &mut 0)
}

/// Per-pixel linear map across channels.
pub fn pointwise_conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    pointwise_impl::<false>(input, kernel, &mut 0)
}

pub fn conv2d(input: &Tensor, kernel: &ConvKernel) -> Result<Tensor> {
    match kernel.kind {
        ConvKind::Standard => standard_conv2d(input, kernel),
        ConvKind::Depthwise => depthwise_conv2d(input, kernel),
        ConvKind::Pointwise => pointwise_conv2d(input, kernel),
    }
}

/// Like [`conv2d`], adding the MACs performed to `counter`.
pub fn conv2d_counted(input: &Tensor, kernel: &ConvKernel, counter: &mut MacCounter) -> Result<Tensor> {
    let slot = counter.slot(kernel.kind);
    match kernel.kind {
        ConvKind::Standard => standard_impl::<true>(input, kernel, slot),
        ConvKind::Depthwise => depthwise_impl::<true>(input, kernel, slot),
        ConvKind::Pointwise => pointwise_impl::<true>(input, kernel, slot),
    }
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Vec<f64>,
}

pub fn conv2d_backward(input: &Tensor, kernel: &ConvKernel, grad_output: &Tensor) -> Result<ConvGrads> {
    kernel.check(input, kernel.kind)?;
    let mut grad_input = Tensor::zeros(input.shape());
    let mut grad_weights = vec![0.0; kernel.weights.len()];
    match kernel.kind {
        ConvKind::Standard | ConvKind::Depthwise => {
            let g = geom(input, kernel)?;
            grad_output.expect_shape([input.batch(), kernel.out_channels, g.oh, g.ow], "conv grad_output")?;
            let kk = g.k * g.k;
            let xs = kernel.in_channels;
            for n in 0..input.batch() {
                for y in 0..kernel.out_channels {
                    let dout = grad_output.plane(n, y);
                    let inputs: Box<dyn Iterator<Item = usize>> = match kernel.kind {
                        ConvKind::Depthwise => Box::new(std::iter::once(y)),
                        _ => Box::new(0..xs),
                    };
                    for x in inputs {
                        let widx = match kernel.kind {
                            ConvKind::Depthwise => x * kk,
                            _ => (y * xs + x) * kk,
                        };
                        let plane = input.plane_len();
                        let start = (n * xs + x) * plane;
                        correlate_plane_backward(
                            input.plane(n, x),
                            &kernel.weights[widx..widx + kk],
                            g,
                            dout,
                            &mut grad_input.data_mut()[start..start + plane],
                            &mut grad_weights[widx..widx + kk],
                        );
                    }
                }
            }
        }
        ConvKind::Pointwise => {
            let (xs, ys) = (kernel.in_channels, kernel.out_channels);
            grad_output.expect_shape([input.batch(), ys, input.height(), input.width()], "conv grad_output")?;
            for n in 0..input.batch() {
                for y in 0..ys {
                    let dout = grad_output.plane(n, y);
                    for x in 0..xs {
                        let wt = kernel.weights[y * xs + x];
                        let mut acc = 0.0;
                        let src = input.plane(n, x);
                        for ((di, &d), &s) in grad_input.plane_mut(n, x).iter_mut().zip(dout).zip(src) {
                            *di += wt * d;
                            acc += d * s;
                        }
                        grad_weights[y * xs + x] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: grad_input,
        weights: grad_weights,
    })
}
