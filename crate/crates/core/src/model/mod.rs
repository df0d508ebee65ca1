//! The presentation-attack-detection network: depthwise-separable feature
//! extractor, dense feature head and an SVC last layer trained end to end
//! with hinge loss.

mod checkpoint;
mod config;
mod network;
mod params;
mod svc;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use config::{ModelConfig, BASE_CHANNELS, DOWNSAMPLING_BLOCKS, FEATURE_WIDTH};
pub(crate) use network::forward_head;
pub use network::{backward, forward_features, forward_train, ForwardPass};
pub use params::{build_model, Gradients, ModelParams, Param, ParamKind};
pub use svc::{classify, hinge_loss, normalize_scores, score_records, svc_score, svc_score_with, ScoreRecord};

use crate::error::Result;
use crate::tensor::Tensor;

/// Loss, scores and parameter gradients for one labelled batch.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub loss: f64,
    pub scores: Vec<f64>,
    pub grads: Gradients,
    pub pass: ForwardPass,
}

/// Train-mode forward pass, hinge loss and full backward pass. `labels`
/// are the ±1 encodings.
pub fn loss_and_gradients(params: &ModelParams, batch: &Tensor, labels: &[f64]) -> Result<LossEval> {
    let pass = forward_train(params, batch)?;
    let scores = svc_score(params, &pass.features)?;
    let (loss, dscore) = hinge_loss(&scores, labels, params.config().svc_c)?;
    let mut grads = Gradients::zeros_like(params);
    let (wi, bi) = svc_indices(params);
    let w = params.svc_weight();
    let mut dfeat = Tensor::zeros(pass.features.shape());
    for (n, &ds) in dscore.iter().enumerate() {
        if ds == 0.0 {
            continue;
        }
        let f = pass.features.item(n);
        for (g, &x) in grads.get_mut(wi).iter_mut().zip(f) {
            *g += ds * x;
        }
        grads.get_mut(bi)[0] += ds;
        let start = n * FEATURE_WIDTH;
        for (d, &wk) in dfeat.data_mut()[start..start + FEATURE_WIDTH].iter_mut().zip(w) {
            *d = ds * wk;
        }
    }
    backward(params, &pass, &dfeat, &mut grads)?;
    Ok(LossEval {
        loss,
        scores,
        grads,
        pass,
    })
}

pub(crate) fn svc_indices(params: &ModelParams) -> (usize, usize) {
    let plan = params.plan();
    (plan.svc_weight, plan.svc_bias)
}

/// Eval-mode raw confidence scores for a batch.
pub fn predict_scores(params: &ModelParams, batch: &Tensor) -> Result<Vec<f64>> {
    let features = forward_features(params, batch, crate::layers::Mode::Eval)?;
    svc_score(params, &features)
}
