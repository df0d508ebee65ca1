//! Central finite-difference gradient checks for every layer and for the
//! whole network's hinge loss.
//!
//! Each single-layer check reduces the layer output to a scalar with a
//! fixed random projection `L = Σ r ⊙ layer(x)`, so the upstream gradient
//! handed to the backward pass is `r`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::{conv2d, conv2d_backward, ConvKernel};
use crate::error::{Error, Result};
use crate::layers::{
    batchnorm2d_train, batchnorm2d_train_backward, dense, dense_backward, maxpool2d, maxpool2d_backward, relu,
    relu_backward,
};
use crate::model::{
    build_model, forward_head, forward_train, hinge_loss, loss_and_gradients, svc_indices, svc_score, svc_score_with,
    ModelConfig, ModelParams, FEATURE_WIDTH,
};
use crate::seed;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;
/// Coordinates probed per parameter tensor in the end-to-end check.
pub const DEFAULT_PROBES: usize = 12;

/// `|a − n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Central differences `(f(x + ε·e_j) − f(x − ε·e_j)) / 2ε` for
/// `j in 0..len`. `eval(j, δ)` must return the objective with coordinate
/// `j` shifted by `δ`.
pub fn central_differences(len: usize, epsilon: f64, eval: impl FnMut(usize, f64) -> Result<f64>) -> Result<Vec<f64>> {
    central_differences_at(&(0..len).collect::<Vec<_>>(), epsilon, eval)
}

/// Same as [`central_differences`] restricted to `coords`.
pub fn central_differences_at(
    coords: &[usize],
    epsilon: f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
) -> Result<Vec<f64>> {
    coords
        .iter()
        .map(|&j| {
            let plus = eval(j, epsilon)?;
            let minus = eval(j, -epsilon)?;
            Ok((plus - minus) / (2.0 * epsilon))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates left out because every step crossed a kink.
    pub kinks_skipped: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::Shape(format!(
            "{name}: {} analytic vs {} numeric gradient entries",
            analytic.len(),
            numeric.len()
        )));
    }
    let mut report = GradCheckReport {
        name: name.to_string(),
        checked: analytic.len(),
        kinks_skipped: 0,
        max_rel_error: 0.0,
        worst_index: 0,
    };
    for (j, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::Numerical(format!(
                "{name}: non-finite gradient at coordinate {j} (analytic {a}, numeric {n})"
            )));
        }
        let e = relative_error(a, n);
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst_index = j;
        }
    }
    Ok(report)
}

/// Checks `analytic` against central differences of `f` around `x`.
pub fn check_vector(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    epsilon: f64,
    mut f: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<GradCheckReport> {
    let mut probe = x.to_vec();
    let numeric = central_differences(x.len(), epsilon, |j, d| {
        probe[j] = x[j] + d;
        let v = f(&probe);
        probe[j] = x[j];
        v
    })?;
    compare(name, analytic, &numeric)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckedLayer {
    StandardConv,
    DepthwiseConv,
    PointwiseConv,
    MaxPool,
    BatchNormTrain,
    Relu,
    Dense,
    SvcHinge,
    EndToEnd,
}

impl CheckedLayer {
    pub const ALL: [CheckedLayer; 9] = [
        CheckedLayer::StandardConv,
        CheckedLayer::DepthwiseConv,
        CheckedLayer::PointwiseConv,
        CheckedLayer::MaxPool,
        CheckedLayer::BatchNormTrain,
        CheckedLayer::Relu,
        CheckedLayer::Dense,
        CheckedLayer::SvcHinge,
        CheckedLayer::EndToEnd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLayer::StandardConv => "standard_conv",
            CheckedLayer::DepthwiseConv => "depthwise_conv",
            CheckedLayer::PointwiseConv => "pointwise_conv",
            CheckedLayer::MaxPool => "maxpool",
            CheckedLayer::BatchNormTrain => "batchnorm_train",
            CheckedLayer::Relu => "relu",
            CheckedLayer::Dense => "dense",
            CheckedLayer::SvcHinge => "svc_hinge",
            CheckedLayer::EndToEnd => "end_to_end",
        }
    }
}

impl fmt::Display for CheckedLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckedLayer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckedLayer::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown layer {s:?}")))
    }
}

/// Reports for one layer: one per differentiated argument.
#[derive(Clone, Debug, Serialize)]
pub struct LayerCheck {
    pub layer: CheckedLayer,
    pub reports: Vec<GradCheckReport>,
}

impl LayerCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }

    pub fn checked(&self) -> usize {
        self.reports.iter().map(|r| r.checked).sum()
    }

    pub fn kinks_skipped(&self) -> usize {
        self.reports.iter().map(|r| r.kinks_skipped).sum()
    }
}

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}

fn uniform_tensor(rng: &mut ChaCha8Rng, shape: [usize; 4]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn project(out: &Tensor, r: &[f64]) -> f64 {
    out.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

fn maybe_flip(mut v: Vec<f64>, fault: bool) -> Vec<f64> {
    if fault {
        v.iter_mut().for_each(|g| *g = -*g);
    }
    v
}

fn conv_check(layer: CheckedLayer, rng: &mut ChaCha8Rng, eps: f64, fault: bool) -> Result<Vec<GradCheckReport>> {
    let (input, kernel) = match layer {
        CheckedLayer::StandardConv => (
            uniform_tensor(rng, [1, 2, 5, 5]),
            ConvKernel::standard(3, 2, 3, uniform(rng, 54, -1.0, 1.0))?,
        ),
        CheckedLayer::DepthwiseConv => (
            uniform_tensor(rng, [2, 3, 6, 6]),
            ConvKernel::depthwise(3, 3, uniform(rng, 27, -1.0, 1.0))?,
        ),
        _ => (
            uniform_tensor(rng, [2, 4, 3, 3]),
            ConvKernel::pointwise(3, 4, uniform(rng, 12, -1.0, 1.0))?,
        ),
    };
    let out = conv2d(&input, &kernel)?;
    let r = uniform(rng, out.len(), -1.0, 1.0);
    let grads = conv2d_backward(&input, &kernel, &Tensor::from_vec(out.shape(), r.clone())?)?;
    let wrt_input = check_vector(
        "input",
        input.data(),
        &maybe_flip(grads.input.into_data(), fault),
        eps,
        |x| {
            Ok(project(
                &conv2d(&Tensor::from_vec(input.shape(), x.to_vec())?, &kernel)?,
                &r,
            ))
        },
    )?;
    let wrt_weights = check_vector("weights", kernel.weights(), &grads.weights, eps, |w| {
        let mut k = kernel.clone();
        k.weights_mut().copy_from_slice(w);
        Ok(project(&conv2d(&input, &k)?, &r))
    })?;
    Ok(vec![wrt_input, wrt_weights])
}

fn maxpool_check(rng: &mut ChaCha8Rng, eps: f64, fault: bool) -> Result<Vec<GradCheckReport>> {
    // distinct values 0.01 apart so no perturbation can reorder a window
    let shape = [1, 2, 8, 8];
    let len: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..len).map(|i| i as f64 * 0.01 - 0.64).collect();
    for i in (1..len).rev() {
        values.swap(i, rng.random_range(0..=i));
    }
    let input = Tensor::from_vec(shape, values)?;
    let pooled = maxpool2d(&input)?;
    let r = uniform(rng, pooled.output.len(), -1.0, 1.0);
    let g = maxpool2d_backward(
        shape,
        &pooled.argmax,
        &Tensor::from_vec(pooled.output.shape(), r.clone())?,
    )?;
    let rep = check_vector("input", input.data(), &maybe_flip(g.into_data(), fault), eps, |x| {
        Ok(project(&maxpool2d(&Tensor::from_vec(shape, x.to_vec())?)?.output, &r))
    })?;
    Ok(vec![rep])
}

fn batchnorm_check(rng: &mut ChaCha8Rng, eps: f64, fault: bool) -> Result<Vec<GradCheckReport>> {
    let input = uniform_tensor(rng, [3, 2, 4, 4]);
    let gamma = uniform(rng, 2, 0.5, 1.5);
    let beta = uniform(rng, 2, -0.5, 0.5);
    let bn_eps = 1e-5;
    let (out, cache) = batchnorm2d_train(&input, &gamma, &beta, bn_eps)?;
    let r = uniform(rng, out.len(), -1.0, 1.0);
    let g = batchnorm2d_train_backward(&cache, &gamma, &Tensor::from_vec(out.shape(), r.clone())?)?;
    let eval = |x: &Tensor, ga: &[f64], be: &[f64]| -> Result<f64> {
        Ok(project(&batchnorm2d_train(x, ga, be, bn_eps)?.0, &r))
    };
    Ok(vec![
        check_vector(
            "input",
            input.data(),
            &maybe_flip(g.input.into_data(), fault),
            eps,
            |x| eval(&Tensor::from_vec(input.shape(), x.to_vec())?, &gamma, &beta),
        )?,
        check_vector("gamma", &gamma, &g.gamma, eps, |ga| eval(&input, ga, &beta))?,
        check_vector("beta", &beta, &g.beta, eps, |be| eval(&input, &gamma, be))?,
    ])
}

fn relu_check(rng: &mut ChaCha8Rng, eps: f64, fault: bool) -> Result<Vec<GradCheckReport>> {
    // magnitudes in [0.1, 1] keep every coordinate away from the kink
    let input = Tensor::from_fn([2, 3, 4, 4], |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let r = uniform(rng, input.len(), -1.0, 1.0);
    let g = relu_backward(&input, &Tensor::from_vec(input.shape(), r.clone())?)?;
    let rep = check_vector("input", input.data(), &maybe_flip(g.into_data(), fault), eps, |x| {
        Ok(project(&relu(&Tensor::from_vec(input.shape(), x.to_vec())?), &r))
    })?;
    Ok(vec![rep])
}

fn dense_check(rng: &mut ChaCha8Rng, eps: f64, fault: bool) -> Result<Vec<GradCheckReport>> {
    let (batch, ind, outd) = (3, 8, 4);
    let x = uniform(rng, batch * ind, -1.0, 1.0);
    let w = uniform(rng, ind * outd, -1.0, 1.0);
    let b = uniform(rng, outd, -1.0, 1.0);
    let r = uniform(rng, batch * outd, -1.0, 1.0);
    let g = dense_backward(&x, batch, &w, &b, &r)?;
    let eval = |x: &[f64], w: &[f64], b: &[f64]| -> Result<f64> {
        Ok(dense(x, batch, w, b)?.iter().zip(&r).map(|(a, b)| a * b).sum())
    };
    Ok(vec![
        check_vector("input", &x, &maybe_flip(g.input, fault), eps, |v| eval(v, &w, &b))?,
        check_vector("weights", &w, &g.weights, eps, |v| eval(&x, v, &b))?,
        check_vector("bias", &b, &g.bias, eps, |v| eval(&x, &w, v))?,
    ])
}

fn svc_hinge_check(rng: &mut ChaCha8Rng, eps: f64, fault: bool) -> Result<Vec<GradCheckReport>> {
    let n = 6;
    let c = 1.5;
    let labels: Vec<f64> = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    // resample until no margin sits within reach of the hinge kink
    let (features, w, b) = loop {
        let f = uniform_tensor(rng, [n, FEATURE_WIDTH, 1, 1]);
        let w = uniform(rng, FEATURE_WIDTH, -0.15, 0.15);
        let b = rng.random_range(-0.5..0.5);
        let s = svc_score_with(&w, b, &f)?;
        if s.iter().zip(&labels).all(|(s, y)| (1.0 - s * y).abs() > 1e-3) {
            break (f, w, b);
        }
    };
    let scores = svc_score_with(&w, b, &features)?;
    let (_, dscore) = hinge_loss(&scores, &labels, c)?;
    let mut gw = vec![0.0; FEATURE_WIDTH];
    let mut gf = vec![0.0; features.len()];
    for (i, &d) in dscore.iter().enumerate() {
        for k in 0..FEATURE_WIDTH {
            gw[k] += d * features.item(i)[k];
            gf[i * FEATURE_WIDTH + k] = d * w[k];
        }
    }
    let gb: f64 = dscore.iter().sum();
    let loss =
        |f: &Tensor, w: &[f64], b: f64| -> Result<f64> { Ok(hinge_loss(&svc_score_with(w, b, f)?, &labels, c)?.0) };
    Ok(vec![
        check_vector("weights", &w, &maybe_flip(gw, fault), eps, |v| loss(&features, v, b))?,
        check_vector("bias", &[b], &[gb], eps, |v| loss(&features, &w, v[0]))?,
        check_vector("features", features.data(), &gf, eps, |v| {
            loss(&Tensor::from_vec(features.shape(), v.to_vec())?, &w, b)
        })?,
    ])
}

/// Runs the finite-difference check for one single layer on randomized
/// small shapes. With `fault` set, the analytic gradient is sign-flipped
/// before comparison.
pub fn check_layer(layer: CheckedLayer, seed: u64, epsilon: f64, fault: bool) -> Result<LayerCheck> {
    let mut rng = seed::rng(seed::derive(seed, layer.name()));
    let reports = match layer {
        CheckedLayer::StandardConv | CheckedLayer::DepthwiseConv | CheckedLayer::PointwiseConv => {
            conv_check(layer, &mut rng, epsilon, fault)?
        }
        CheckedLayer::MaxPool => maxpool_check(&mut rng, epsilon, fault)?,
        CheckedLayer::BatchNormTrain => batchnorm_check(&mut rng, epsilon, fault)?,
        CheckedLayer::Relu => relu_check(&mut rng, epsilon, fault)?,
        CheckedLayer::Dense => dense_check(&mut rng, epsilon, fault)?,
        CheckedLayer::SvcHinge => svc_hinge_check(&mut rng, epsilon, fault)?,
        CheckedLayer::EndToEnd => {
            return check_end_to_end(&ModelConfig::tiny(), 2, Some(DEFAULT_PROBES), seed, epsilon, fault)
        }
    };
    Ok(LayerCheck { layer, reports })
}

/// Step divisors tried, in order, when a perturbation changes a branch.
const KINK_STEP_DIVISORS: [f64; 3] = [1.0, 10.0, 100.0];

#[derive(Clone, Copy, PartialEq, Eq)]
enum Region {
    Svc,
    Head,
    Extractor,
}

/// Checks dLoss/dθ for every trainable parameter tensor of a freshly built
/// model (with a random SVC layer so the signal reaches the extractor) in
/// train mode on a fixed random batch. Tensors larger than `per_param` are
/// probed at `per_param` seeded random coordinates; `None` probes all.
///
/// The loss is piecewise smooth: ReLU signs, maxpool winners and the hinge
/// active set switch branches. A central difference is only taken when
/// both perturbed evaluations stay on the unperturbed branches; otherwise
/// the step shrinks, and a coordinate whose every step crosses a kink is
/// counted in `kinks_skipped` instead of compared.
///
/// Perturbing a head parameter cannot change the extractor output, so for
/// those coordinates the loss is re-evaluated from the cached pooled
/// activation; SVC parameters likewise reuse the cached features.
pub fn check_end_to_end(
    config: &ModelConfig,
    batch: usize,
    per_param: Option<usize>,
    seed: u64,
    epsilon: f64,
    fault: bool,
) -> Result<LayerCheck> {
    let mut params = build_model(config, seed)?;
    let mut rng = seed::rng(seed::derive(seed, "end-to-end"));
    let (wi, bi) = svc_indices(&params);
    let w = uniform(&mut rng, FEATURE_WIDTH, -0.1, 0.1);
    params.data_mut(wi).copy_from_slice(&w);
    params.data_mut(bi)[0] = rng.random_range(-0.1..0.1);
    let size = config.input_size;
    let images = Tensor::from_fn([batch, config.input_channels, size, size], |_| {
        rng.random_range(0.0..1.0)
    });
    let labels: Vec<f64> = (0..batch).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let c = config.svc_c;

    let eval = loss_and_gradients(&params, &images, &labels)?;
    let pooled = eval
        .pass
        .pooled(&params)
        .cloned()
        .ok_or_else(|| Error::Shape("forward pass has no pooled activation".into()))?;
    let features = eval.pass.features.clone();

    let evaluate = |params: &ModelParams, region: Region| -> Result<(f64, Vec<u64>)> {
        let (scores, mut pattern) = match region {
            Region::Svc => (svc_score(params, &features)?, Vec::new()),
            Region::Head => {
                let pass = forward_head(params, &pooled)?;
                (svc_score(params, &pass.features)?, pass.branch_pattern())
            }
            Region::Extractor => {
                let pass = forward_train(params, &images)?;
                (svc_score(params, &pass.features)?, pass.branch_pattern())
            }
        };
        pattern.extend(scores.iter().zip(&labels).map(|(s, y)| u64::from(y * s < 1.0)));
        Ok((hinge_loss(&scores, &labels, c)?.0, pattern))
    };

    let mut reports = Vec::new();
    for idx in 0..params.len() {
        let p = &params.params()[idx];
        if !p.kind.is_trainable() {
            continue;
        }
        let region = if idx == wi || idx == bi {
            Region::Svc
        } else if p.name.starts_with("head.") {
            Region::Head
        } else {
            Region::Extractor
        };
        let name = p.name.clone();
        let origin = p.data.clone();
        let coords: Vec<usize> = match per_param {
            Some(k) if k < origin.len() => rand::seq::index::sample(&mut rng, origin.len(), k).into_vec(),
            _ => (0..origin.len()).collect(),
        };
        let full = eval.grads.get(idx);
        let base = evaluate(&params, region)?.1;
        let (mut kept, mut analytic, mut numeric) = (Vec::new(), Vec::new(), Vec::new());
        let mut skipped = 0;
        for &j in &coords {
            let mut estimate = None;
            for div in KINK_STEP_DIVISORS {
                let h = epsilon / div;
                params.data_mut(idx)[j] = origin[j] + h;
                let plus = evaluate(&params, region);
                params.data_mut(idx)[j] = origin[j] - h;
                let minus = evaluate(&params, region);
                params.data_mut(idx)[j] = origin[j];
                let ((lp, pp), (lm, pm)) = (plus?, minus?);
                if pp == base && pm == base {
                    estimate = Some((lp - lm) / (2.0 * h));
                    break;
                }
            }
            match estimate {
                Some(n) => {
                    kept.push(j);
                    analytic.push(full[j]);
                    numeric.push(n);
                }
                None => skipped += 1,
            }
        }
        let mut report = compare(&name, &maybe_flip(analytic, fault), &numeric)?;
        report.worst_index = kept.get(report.worst_index).copied().unwrap_or(0);
        report.kinks_skipped = skipped;
        reports.push(report);
    }
    Ok(LayerCheck {
        layer: CheckedLayer::EndToEnd,
        reports,
    })
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    pub epsilon: f64,
    /// Model config and batch size for the end-to-end check.
    pub end_to_end: Option<(ModelConfig, usize)>,
    pub probes_per_param: Option<usize>,
    /// Layer whose analytic gradient is sign-flipped, for exercising the
    /// failure path.
    pub fault: Option<CheckedLayer>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            end_to_end: Some((ModelConfig::tiny(), 2)),
            probes_per_param: Some(DEFAULT_PROBES),
            fault: None,
        }
    }
}

pub fn run_suite(options: &SuiteOptions) -> Result<Vec<LayerCheck>> {
    let mut out = Vec::new();
    for layer in CheckedLayer::ALL {
        let fault = options.fault == Some(layer);
        if layer == CheckedLayer::EndToEnd {
            if let Some((cfg, batch)) = &options.end_to_end {
                out.push(check_end_to_end(
                    cfg,
                    *batch,
                    options.probes_per_param,
                    options.seed,
                    options.epsilon,
                    fault,
                )?);
            }
        } else {
            out.push(check_layer(layer, options.seed, options.epsilon, fault)?);
        }
    }
    Ok(out)
}
