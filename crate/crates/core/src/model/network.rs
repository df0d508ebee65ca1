//! Layer plan of the extractor and feature head, with cached forward and
//! reverse-mode backward passes.

use std::ops::Range;
use std::sync::Arc;

use super::config::{ModelConfig, DOWNSAMPLING_BLOCKS, FEATURE_WIDTH};
use super::params::{Gradients, ModelParams, ParamKind};
use crate::conv::{conv2d, conv2d_backward, ConvKernel, ConvKind};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm2d_eval, batchnorm2d_train, batchnorm2d_train_backward, dense, dense_backward, global_avg_pool,
    global_avg_pool_backward, maxpool2d, maxpool2d_backward, relu, relu_backward, BnCache, BnState, Mode,
};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub fan_in: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Stage {
    Conv {
        weight: usize,
        kind: ConvKind,
        in_channels: usize,
        out_channels: usize,
        size: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Relu,
    MaxPool,
    GlobalAvgPool,
    Dense {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct Plan {
    pub specs: Vec<ParamSpec>,
    pub stages: Vec<Stage>,
    pub svc_weight: usize,
    pub svc_bias: usize,
    /// First stage after global average pooling.
    pub head_start: usize,
}

struct Builder {
    specs: Vec<ParamSpec>,
    stages: Vec<Stage>,
}

impl Builder {
    fn param(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> usize {
        self.specs.push(ParamSpec {
            name,
            kind,
            shape,
            fan_in,
        });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, kind: ConvKind, in_channels: usize, out_channels: usize, size: usize) {
        let (shape, fan_in) = match kind {
            ConvKind::Standard => (vec![out_channels, in_channels, size, size], in_channels * size * size),
            ConvKind::Depthwise => (vec![in_channels, size, size], size * size),
            ConvKind::Pointwise => (vec![out_channels, in_channels, 1, 1], in_channels),
        };
        let weight = self.param(format!("{prefix}.weight"), ParamKind::ConvWeight, shape, fan_in);
        self.stages.push(Stage::Conv {
            weight,
            kind,
            in_channels,
            out_channels,
            size,
        });
    }

    fn batchnorm_relu(&mut self, prefix: &str, channels: usize) {
        let mut p = |suffix: &str, kind| self.param(format!("{prefix}.{suffix}"), kind, vec![channels], 1);
        let gamma = p("gamma", ParamKind::BnGamma);
        let beta = p("beta", ParamKind::BnBeta);
        let mean = p("running_mean", ParamKind::BnRunningMean);
        let var = p("running_var", ParamKind::BnRunningVar);
        self.stages.push(Stage::BatchNorm { gamma, beta, mean, var });
        self.stages.push(Stage::Relu);
    }

    fn dense_relu(&mut self, prefix: &str, in_dim: usize, out_dim: usize) {
        let weight = self.param(
            format!("{prefix}.weight"),
            ParamKind::DenseWeight,
            vec![in_dim, out_dim],
            in_dim,
        );
        let bias = self.param(format!("{prefix}.bias"), ParamKind::DenseBias, vec![out_dim], in_dim);
        self.stages.push(Stage::Dense { weight, bias });
        self.stages.push(Stage::Relu);
    }
}

impl Plan {
    pub fn new(config: &ModelConfig) -> Plan {
        let ch = config.channels();
        let k = config.kernel_size;
        let mut b = Builder {
            specs: Vec::new(),
            stages: Vec::new(),
        };
        b.conv("stem.conv", ConvKind::Standard, config.input_channels, ch[0], k);
        b.batchnorm_relu("stem.bn", ch[0]);
        for block in 0..DOWNSAMPLING_BLOCKS {
            let (cin, cout) = (ch[block], ch[block + 1]);
            for rep in 0..config.block_repeats[block] {
                let width = if rep == 0 { cin } else { cout };
                let prefix = format!("block{}.{rep}", block + 1);
                b.conv(&format!("{prefix}.dw"), ConvKind::Depthwise, width, width, k);
                b.batchnorm_relu(&format!("{prefix}.dw_bn"), width);
                b.conv(&format!("{prefix}.pw"), ConvKind::Pointwise, width, cout, 1);
                b.batchnorm_relu(&format!("{prefix}.pw_bn"), cout);
            }
            b.stages.push(Stage::MaxPool);
        }
        b.stages.push(Stage::GlobalAvgPool);
        let head_start = b.stages.len();
        b.dense_relu("head.fc1", ch[DOWNSAMPLING_BLOCKS], config.hidden_width);
        b.dense_relu("head.fc2", config.hidden_width, FEATURE_WIDTH);
        let svc_weight = b.param(
            "svc.weight".into(),
            ParamKind::SvcWeight,
            vec![FEATURE_WIDTH],
            FEATURE_WIDTH,
        );
        let svc_bias = b.param("svc.bias".into(), ParamKind::SvcBias, vec![1], FEATURE_WIDTH);
        Plan {
            specs: b.specs,
            stages: b.stages,
            svc_weight,
            svc_bias,
            head_start,
        }
    }
}

#[derive(Clone, Debug)]
enum StageCache {
    /// Eval-mode stages, which are never differentiated.
    Untracked,
    Conv(Tensor),
    BatchNorm(BnCache),
    Relu(Tensor),
    MaxPool {
        input_shape: [usize; 4],
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        input_shape: [usize; 4],
    },
    Dense(Tensor),
}

/// A train-mode forward pass with everything the backward pass needs.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub features: Tensor,
    caches: Vec<StageCache>,
}

impl ForwardPass {
    /// Output of global average pooling, the input of the dense head.
    pub(crate) fn pooled(&self, params: &ModelParams) -> Option<&Tensor> {
        match self.caches.get(params.plan().head_start) {
            Some(StageCache::Dense(x)) => Some(x),
            _ => None,
        }
    }

    /// Branch taken at every non-smooth point: ReLU input signs (packed
    /// bits) and maxpool winners. Equal patterns mean the loss is smooth
    /// between two parameter settings.
    pub(crate) fn branch_pattern(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for cache in &self.caches {
            match cache {
                StageCache::Relu(x) => out.extend(x.data().chunks(64).map(|chunk| {
                    chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |w, (i, &v)| if v > 0.0 { w | (1 << i) } else { w })
                })),
                StageCache::MaxPool { argmax, .. } => out.extend(argmax.iter().map(|&a| a as u64)),
                _ => {}
            }
        }
        out
    }
}

fn kernel(params: &ModelParams, stage: &Stage) -> Result<ConvKernel> {
    let Stage::Conv {
        weight,
        kind,
        in_channels,
        out_channels,
        size,
    } = *stage
    else {
        unreachable!("kernel() called on a non-conv stage")
    };
    let w = params.data(weight).to_vec();
    match kind {
        ConvKind::Standard => ConvKernel::standard(out_channels, in_channels, size, w),
        ConvKind::Depthwise => ConvKernel::depthwise(in_channels, size, w),
        ConvKind::Pointwise => ConvKernel::pointwise(out_channels, in_channels, w),
    }
}

fn run_stages(
    params: &ModelParams,
    range: Range<usize>,
    input: Tensor,
    mode: Mode,
    mut caches: Option<&mut Vec<StageCache>>,
) -> Result<Tensor> {
    let eps = params.config().batchnorm.epsilon;
    let mut x = input;
    for stage in &params.plan().stages[range] {
        let (y, cache) = match stage {
            Stage::Conv { .. } => (conv2d(&x, &kernel(params, stage)?)?, StageCache::Conv(x)),
            Stage::BatchNorm { gamma, beta, mean, var } => {
                let (g, b) = (params.data(*gamma), params.data(*beta));
                match mode {
                    Mode::Train => {
                        let (y, c) = batchnorm2d_train(&x, g, b, eps)?;
                        (y, StageCache::BatchNorm(c))
                    }
                    Mode::Eval => {
                        let state = BnState {
                            running_mean: params.data(*mean).to_vec(),
                            running_var: params.data(*var).to_vec(),
                        };
                        (batchnorm2d_eval(&x, g, b, &state, eps)?, StageCache::Untracked)
                    }
                }
            }
            Stage::Relu => (relu(&x), StageCache::Relu(x)),
            Stage::MaxPool => {
                let pooled = maxpool2d(&x)?;
                (
                    pooled.output,
                    StageCache::MaxPool {
                        input_shape: x.shape(),
                        argmax: pooled.argmax,
                    },
                )
            }
            Stage::GlobalAvgPool => (
                global_avg_pool(&x),
                StageCache::GlobalAvgPool { input_shape: x.shape() },
            ),
            Stage::Dense { weight, bias } => {
                let n = x.batch();
                let out = dense(x.data(), n, params.data(*weight), params.data(*bias))?;
                let width = params.data(*bias).len();
                (Tensor::from_vec([n, width, 1, 1], out)?, StageCache::Dense(x))
            }
        };
        if let Some(c) = caches.as_deref_mut() {
            c.push(cache);
        }
        x = y;
    }
    Ok(x)
}

fn check_batch(params: &ModelParams, batch: &Tensor) -> Result<()> {
    let cfg = params.config();
    let [n, c, h, w] = batch.shape();
    if n == 0 || c != cfg.input_channels || h != cfg.input_size || w != cfg.input_size {
        return Err(Error::Shape(format!(
            "model expects (N>0, {}, {}, {}) input, got {:?}",
            cfg.input_channels,
            cfg.input_size,
            cfg.input_size,
            batch.shape()
        )));
    }
    Ok(())
}

/// Runs the extractor and head, returning the `(N, 256, 1, 1)` features
/// that feed the SVC layer.
pub fn forward_features(params: &ModelParams, batch: &Tensor, mode: Mode) -> Result<Tensor> {
    check_batch(params, batch)?;
    let n = params.plan().stages.len();
    run_stages(params, 0..n, batch.clone(), mode, None)
}

/// Train-mode forward pass that keeps per-stage caches for [`backward`].
pub fn forward_train(params: &ModelParams, batch: &Tensor) -> Result<ForwardPass> {
    check_batch(params, batch)?;
    let n = params.plan().stages.len();
    let mut caches = Vec::with_capacity(n);
    let features = run_stages(params, 0..n, batch.clone(), Mode::Train, Some(&mut caches))?;
    Ok(ForwardPass { features, caches })
}

/// Runs only the dense head from a pooled `(N, C, 1, 1)` activation. The
/// returned pass caches the head stages only.
pub(crate) fn forward_head(params: &ModelParams, pooled: &Tensor) -> Result<ForwardPass> {
    let plan = params.plan();
    let mut caches = Vec::new();
    let features = run_stages(
        params,
        plan.head_start..plan.stages.len(),
        pooled.clone(),
        Mode::Train,
        Some(&mut caches),
    )?;
    Ok(ForwardPass { features, caches })
}

/// Backpropagates `grad_features` (dLoss/dfeatures) through the network,
/// adding parameter gradients into `grads` and returning dLoss/dinput.
pub fn backward(
    params: &ModelParams,
    pass: &ForwardPass,
    grad_features: &Tensor,
    grads: &mut Gradients,
) -> Result<Tensor> {
    grad_features.expect_shape(pass.features.shape(), "feature gradient")?;
    let stages = &params.plan().stages;
    if pass.caches.len() != stages.len() {
        return Err(Error::Shape("forward pass does not match this model".into()));
    }
    let mut g = grad_features.clone();
    for (stage, cache) in stages.iter().zip(&pass.caches).rev() {
        g = match (stage, cache) {
            (Stage::Conv { weight, .. }, StageCache::Conv(input)) => {
                let cg = conv2d_backward(input, &kernel(params, stage)?, &g)?;
                grads.accumulate(*weight, &cg.weights);
                cg.input
            }
            (Stage::BatchNorm { gamma, beta, .. }, StageCache::BatchNorm(c)) => {
                let bg = batchnorm2d_train_backward(c, params.data(*gamma), &g)?;
                grads.accumulate(*gamma, &bg.gamma);
                grads.accumulate(*beta, &bg.beta);
                bg.input
            }
            (Stage::Relu, StageCache::Relu(input)) => relu_backward(input, &g)?,
            (Stage::MaxPool, StageCache::MaxPool { input_shape, argmax }) => {
                maxpool2d_backward(*input_shape, argmax, &g)?
            }
            (Stage::GlobalAvgPool, StageCache::GlobalAvgPool { input_shape }) => {
                global_avg_pool_backward(*input_shape, &g)?
            }
            (Stage::Dense { weight, bias }, StageCache::Dense(input)) => {
                let w = params.data(*weight);
                let b = params.data(*bias);
                let dg = dense_backward(input.data(), input.batch(), w, b, g.data())?;
                grads.accumulate(*weight, &dg.weights);
                grads.accumulate(*bias, &dg.bias);
                Tensor::from_vec(input.shape(), dg.input)?
            }
            _ => return Err(Error::Shape("forward cache does not match the layer plan".into())),
        };
    }
    Ok(g)
}

impl ModelParams {
    /// Folds the batch statistics of a train-mode pass into the running
    /// mean/variance buffers.
    pub fn update_running_stats(&mut self, pass: &ForwardPass) {
        let momentum = self.config().batchnorm.momentum;
        let plan = Arc::clone(&self.plan);
        for (stage, cache) in plan.stages.iter().zip(&pass.caches) {
            if let (Stage::BatchNorm { mean, var, .. }, StageCache::BatchNorm(c)) = (stage, cache) {
                let mut state = BnState {
                    running_mean: self.data(*mean).to_vec(),
                    running_var: self.data(*var).to_vec(),
                };
                state.update(c, momentum);
                self.data_mut(*mean).copy_from_slice(&state.running_mean);
                self.data_mut(*var).copy_from_slice(&state.running_var);
            }
        }
    }
}
