//! Minibatch training of the whole network against the hinge loss with
//! Adam, plus label encoding and augmentation.

mod adam;
mod augment;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment, flip_horizontal, rotate, shear, AugmentConfig};

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::layers::Mode;
use crate::metrics::compute_metrics_from_labels;
use crate::model::{
    classify, forward_features, hinge_loss, loss_and_gradients, predict_scores, svc_score, Gradients, ModelParams,
    FEATURE_WIDTH,
};
use crate::parallel::par_map;
use crate::seed;
use crate::tensor::Tensor;

/// Live is +1, spoof is −1.
pub fn encode_label(label: Label) -> f64 {
    match label {
        Label::Live => 1.0,
        Label::Spoof => -1.0,
    }
}

pub fn decode_label(value: f64) -> Result<Label> {
    if value == 1.0 {
        Ok(Label::Live)
    } else if value == -1.0 {
        Ok(Label::Spoof)
    } else {
        Err(Error::Invalid(format!("label encoding must be +1 or -1, got {value}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub coupled_weight_decay: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub augmentation: AugmentConfig,
    /// Keep the extractor and head fixed (eval mode) and fit only the SVC
    /// layer.
    pub freeze_extractor: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            learning_rate: adam.learning_rate,
            weight_decay: adam.weight_decay,
            coupled_weight_decay: adam.coupled_weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            epochs: 30,
            batch_size: 32,
            augmentation: AugmentConfig::default(),
            freeze_extractor: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad(format!("adam_epsilon must be positive, got {}", self.adam_epsilon));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        self.augmentation.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
            weight_decay: self.weight_decay,
            coupled_weight_decay: self.coupled_weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Hinge loss per sample, averaged over the epoch.
    pub mean_loss: f64,
    /// ACE (%) of the train-mode scores seen during the epoch.
    pub train_ace: f64,
    /// ACE (%) on the validation set in eval mode, when one is given.
    pub val_ace: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// Optimizer steps taken.
    pub steps: u64,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,mean_loss,train_ace,val_ace,seconds";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.epochs {
            let val = r.val_ace.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{:.3}",
                r.epoch, r.mean_loss, r.train_ace, val, r.seconds
            );
        }
        out
    }
}

/// Stacks sample images into one batch tensor.
pub fn stack_images(samples: &[&Sample]) -> Result<Tensor> {
    let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}

/// Eval-mode raw scores, computed `batch_size` samples at a time.
pub fn score_samples(params: &ModelParams, samples: &[Sample], batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        out.extend(predict_scores(params, &stack_images(&refs)?)?);
    }
    Ok(out)
}

/// Eval-mode ACE (%) on `samples`.
pub fn evaluate_ace(params: &ModelParams, samples: &[Sample], batch_size: usize) -> Result<f64> {
    let scores = score_samples(params, samples, batch_size)?;
    let predicted: Vec<Label> = scores.iter().map(|&s| classify(s)).collect::<Result<_>>()?;
    let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
    Ok(compute_metrics_from_labels(&predicted, &truth)?.ace)
}

fn check_dataset(params: &ModelParams, samples: &[Sample], what: &str) -> Result<()> {
    let cfg = params.config();
    let want = [1, cfg.input_channels, cfg.input_size, cfg.input_size];
    if let Some(s) = samples.iter().find(|s| s.image.shape() != want) {
        return Err(Error::Shape(format!(
            "{what} sample {:?} has shape {:?}, model expects {want:?}",
            s.id,
            s.image.shape()
        )));
    }
    Ok(())
}

/// Per-epoch hook: gets the finished record and the current parameters.
pub type EpochHook<'a> = dyn FnMut(&EpochRecord, &ModelParams) -> Result<()> + 'a;

/// Trains `params` on `data` and returns the final parameters and log.
///
/// Every random draw derives from `seed`: the epoch's shuffle from
/// `(seed, epoch)` and each sample's augmentation from
/// `(seed, epoch, sample id)`, so results do not depend on `workers`.
pub fn train(
    params: ModelParams,
    data: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
    seed: u64,
    workers: usize,
) -> Result<(ModelParams, TrainLog)> {
    train_with_hook(params, data, validation, config, seed, workers, &mut |_, _| Ok(()))
}

pub fn train_with_hook(
    mut params: ModelParams,
    data: &[Sample],
    validation: &[Sample],
    config: &TrainConfig,
    seed: u64,
    workers: usize,
    hook: &mut EpochHook<'_>,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    for label in [Label::Live, Label::Spoof] {
        if !data.iter().any(|s| s.label == label) {
            return Err(Error::Invalid(format!(
                "training set has no {label} samples; hinge training needs both classes"
            )));
        }
    }
    check_dataset(&params, data, "training")?;
    check_dataset(&params, validation, "validation")?;

    let adam = config.adam();
    let mut state = AdamState::new(&params);
    if config.freeze_extractor {
        state.restrict(&params, |n| n.starts_with("svc."));
    }
    let c = params.config().svc_c;
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut seed::rng(seed::derive_indexed(seed, epoch as u64, "shuffle")));
        let aug_seed = seed::derive_indexed(seed, epoch as u64, "augment");
        let mut loss_sum = 0.0;
        let mut predicted = Vec::with_capacity(data.len());
        let mut truth = Vec::with_capacity(data.len());
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let images: Vec<Tensor> = par_map(batch, workers, |&i| {
                let s = &data[i];
                augment(
                    &s.image,
                    &config.augmentation,
                    &mut seed::rng(seed::derive(aug_seed, &s.id)),
                )
            });
            let images = Tensor::stack(&images)?;
            let labels: Vec<f64> = batch.iter().map(|&i| encode_label(data[i].label)).collect();
            let (loss, scores, grads) = if config.freeze_extractor {
                let features = forward_features(&params, &images, Mode::Eval)?;
                let scores = svc_score(&params, &features)?;
                let (loss, dscore) = hinge_loss(&scores, &labels, c)?;
                (loss, scores, svc_gradients(&params, &features, &dscore))
            } else {
                let eval = loss_and_gradients(&params, &images, &labels)?;
                if eval.loss.is_finite() {
                    params.update_running_stats(&eval.pass);
                }
                (eval.loss, eval.scores, eval.grads)
            };
            if !loss.is_finite() {
                return Err(Error::Numerical(format!("loss is {loss} at epoch {epoch}, batch {b}")));
            }
            adam_step(&mut params, &grads, &mut state, &adam)
                .map_err(|e| Error::Numerical(format!("epoch {epoch}, batch {b}: {e}")))?;
            log.steps += 1;
            loss_sum += loss;
            for (&i, &s) in batch.iter().zip(&scores) {
                predicted.push(classify(s)?);
                truth.push(data[i].label);
            }
        }
        let train_ace = compute_metrics_from_labels(&predicted, &truth)?.ace;
        let val_ace = if validation.is_empty() {
            None
        } else {
            Some(evaluate_ace(&params, validation, config.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            mean_loss: loss_sum / (c * data.len() as f64),
            train_ace,
            val_ace,
            seconds: start.elapsed().as_secs_f64(),
        };
        hook(&record, &params)?;
        log.epochs.push(record);
    }
    Ok((params, log))
}

fn svc_gradients(params: &ModelParams, features: &Tensor, dscore: &[f64]) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    let wi = params.index_of("svc.weight").expect("model has an SVC layer");
    let bi = params.index_of("svc.bias").expect("model has an SVC layer");
    for (n, &d) in dscore.iter().enumerate() {
        let f = &features.item(n)[..FEATURE_WIDTH];
        grads.get_mut(wi).iter_mut().zip(f).for_each(|(g, x)| *g += d * x);
        grads.get_mut(bi)[0] += d;
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize, CorpusSpec};
    use crate::model::{build_model, ModelConfig};

    fn corpus(n_live: usize, n_spoof: usize) -> Vec<Sample> {
        synthesize(
            &CorpusSpec {
                n_live,
                n_spoof_per_material: n_spoof,
                sensors: vec!["biometrika".into()],
                materials: vec!["latex".into()],
                image_size: 64,
            },
            11,
            1,
        )
        .unwrap()
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn label_encoding() {
        assert_eq!(encode_label(Label::Live), 1.0);
        assert_eq!(encode_label(Label::Spoof), -1.0);
        for l in [Label::Live, Label::Spoof] {
            assert_eq!(decode_label(encode_label(l)).unwrap(), l);
        }
        assert!(decode_label(0.0).is_err());
    }

    #[test]
    fn one_epoch_step_count() {
        let data = corpus(5, 4);
        let p = build_model(&ModelConfig::tiny(), 1).unwrap();
        let (_, log) = train(p, &data, &[], &quick(), 1, 1).unwrap();
        assert_eq!(log.steps, 3);
        assert_eq!(log.epochs.len(), 1);
        assert!(log.epochs[0].mean_loss.is_finite() && log.epochs[0].mean_loss >= 0.0);
        let zero = TrainConfig { epochs: 0, ..quick() };
        let p = build_model(&ModelConfig::tiny(), 1).unwrap();
        assert!(matches!(train(p, &data, &[], &zero, 1, 1), Err(Error::Config(_))));
    }

    #[test]
    fn single_class_rejected() {
        let data: Vec<Sample> = corpus(3, 1).into_iter().filter(|s| s.label == Label::Live).collect();
        let p = build_model(&ModelConfig::tiny(), 1).unwrap();
        let err = train(p, &data, &[], &quick(), 1, 1).unwrap_err();
        assert!(err.to_string().contains("no spoof"), "{err}");
    }

    #[test]
    fn deterministic_across_worker_counts() {
        let data = corpus(4, 4);
        let p = build_model(&ModelConfig::tiny(), 2).unwrap();
        let cfg = TrainConfig { epochs: 2, ..quick() };
        let (a, la) = train(p.clone(), &data, &data, &cfg, 5, 1).unwrap();
        let (b, lb) = train(p, &data, &data, &cfg, 5, 3).unwrap();
        assert_eq!(a, b);
        let strip = |l: &TrainLog| {
            l.epochs
                .iter()
                .map(|r| (r.mean_loss, r.train_ace, r.val_ace))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&la), strip(&lb));
    }

    #[test]
    fn tiny_learning_rate_leaves_weights() {
        let data = corpus(4, 4);
        let p = build_model(&ModelConfig::tiny(), 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-9,
            weight_decay: 0.0,
            ..quick()
        };
        let (q, _) = train(p.clone(), &data, &[], &cfg, 5, 1).unwrap();
        for (a, b) in q.params().iter().zip(p.params()).filter(|(a, _)| a.kind.is_trainable()) {
            let d = a
                .data
                .iter()
                .zip(&b.data)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(d <= 1e-6, "{}: {d}", a.name);
        }
    }

    #[test]
    fn frozen_extractor_fits_two_samples() {
        let data: Vec<Sample> = corpus(1, 1);
        let p = build_model(&ModelConfig::tiny(), 4).unwrap();
        let cfg = TrainConfig {
            epochs: 200,
            batch_size: 2,
            learning_rate: 1e-2,
            freeze_extractor: true,
            augmentation: AugmentConfig::none(),
            ..TrainConfig::default()
        };
        let (q, log) = train(p.clone(), &data, &[], &cfg, 6, 1).unwrap();
        assert_eq!(log.steps, 200);
        assert_eq!(log.epochs.last().unwrap().mean_loss, 0.0, "{:?}", log.epochs.last());
        let frozen = |m: &ModelParams| {
            m.params()
                .iter()
                .filter(|x| !x.name.starts_with("svc."))
                .cloned()
                .collect::<Vec<_>>()
        };
        assert_eq!(frozen(&q), frozen(&p));
    }

    #[test]
    fn csv_layout() {
        let log = TrainLog {
            epochs: vec![EpochRecord {
                epoch: 1,
                mean_loss: 0.5,
                train_ace: 10.0,
                val_ace: None,
                seconds: 1.23456,
            }],
            steps: 1,
        };
        assert_eq!(
            log.to_csv(),
            "epoch,mean_loss,train_ace,val_ace,seconds\n1,0.5,10,,1.235\n"
        );
    }
}
