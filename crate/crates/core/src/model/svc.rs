//! The SVC last layer: confidence scores, hinge loss, the sign decision
//! rule and min-max score normalization.

use serde::{Deserialize, Serialize};

use super::config::FEATURE_WIDTH;
use super::params::ModelParams;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::tensor::Tensor;

/// `score_i = Wᵀ·features_i + b` for each row of an `(N, 256, 1, 1)`
/// feature tensor.
pub fn svc_score(params: &ModelParams, features: &Tensor) -> Result<Vec<f64>> {
    svc_score_with(params.svc_weight(), params.svc_bias(), features)
}

pub fn svc_score_with(weight: &[f64], bias: f64, features: &Tensor) -> Result<Vec<f64>> {
    let width = features.channels() * features.plane_len();
    if width != weight.len() || weight.len() != FEATURE_WIDTH {
        return Err(Error::Shape(format!(
            "SVC layer expects {FEATURE_WIDTH} features per sample, got {width} (weight length {})",
            weight.len()
        )));
    }
    Ok((0..features.batch())
        .map(|n| bias + features.item(n).iter().zip(weight).map(|(f, w)| f * w).sum::<f64>())
        .collect())
}

/// Hinge loss `C·Σ max(0, 1 − y·s)` and its gradient with respect to each
/// score. The subgradient on the margin (`y·s = 1`) is zero.
pub fn hinge_loss(scores: &[f64], labels: &[f64], c: f64) -> Result<(f64, Vec<f64>)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Config(format!("hinge loss weight C must be positive, got {c}")));
    }
    if let Some(bad) = labels.iter().find(|&&y| y != 1.0 && y != -1.0) {
        return Err(Error::Invalid(format!("hinge labels must be -1 or +1, got {bad}")));
    }
    let mut loss = 0.0;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let margin = y * s;
            if margin < 1.0 {
                loss += 1.0 - margin;
                -c * y
            } else {
                0.0
            }
        })
        .collect();
    Ok((c * loss, grad))
}

/// Sign rule: positive scores are live; zero and negative are spoof.
pub fn classify(raw_score: f64) -> Result<Label> {
    if !raw_score.is_finite() {
        return Err(Error::Numerical(format!(
            "cannot classify non-finite score {raw_score}"
        )));
    }
    Ok(if raw_score > 0.0 { Label::Live } else { Label::Spoof })
}

/// Min-max normalization over the given score set. A set with no spread
/// maps every score to 0.5.
pub fn normalize_scores(raw: &[f64]) -> Result<Vec<f64>> {
    if raw.is_empty() {
        return Err(Error::Invalid("cannot normalize an empty score set".into()));
    }
    if let Some(bad) = raw.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("cannot normalize non-finite score {bad}")));
    }
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![0.5; raw.len()]);
    }
    let range = max - min;
    Ok(raw.iter().map(|&s| ((s - min) / range).clamp(0.0, 1.0)).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub raw_score: f64,
    pub normalized_score: f64,
    pub predicted_label: Label,
    pub true_label: Label,
}

/// Builds records for a scored set, normalizing over the whole set.
pub fn score_records(ids: &[String], raw: &[f64], truth: &[Label]) -> Result<Vec<ScoreRecord>> {
    if ids.len() != raw.len() || raw.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} ids, {} scores and {} labels",
            ids.len(),
            raw.len(),
            truth.len()
        )));
    }
    let normalized = normalize_scores(raw)?;
    ids.iter()
        .zip(raw)
        .zip(normalized)
        .zip(truth)
        .map(|(((id, &r), n), &t)| {
            Ok(ScoreRecord {
                sample_id: id.clone(),
                raw_score: r,
                normalized_score: n,
                predicted_label: classify(r)?,
                true_label: t,
            })
        })
        .collect()
}
