use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Gradients, ModelParams};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    /// Adds `weight_decay · θ` to the gradient instead of shrinking the
    /// weights directly.
    pub coupled_weight_decay: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 4e-4,
            coupled_weight_decay: false,
        }
    }
}

/// Moment estimates, step count and the set of parameters being updated.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
    /// Parameters the optimizer touches. Running statistics are never
    /// active.
    pub active: Vec<bool>,
}

impl AdamState {
    /// Zero moments; every trainable parameter active.
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: params.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
            t: 0,
            active: params.params().iter().map(|p| p.kind.is_trainable()).collect(),
        }
    }

    /// Restricts updates to parameters whose name satisfies `keep`.
    pub fn restrict(&mut self, params: &ModelParams, keep: impl Fn(&str) -> bool) {
        for (a, p) in self.active.iter_mut().zip(params.params()) {
            *a = *a && keep(&p.name);
        }
    }
}

/// One bias-corrected Adam update of every active parameter. Decoupled
/// weight decay (`θ ← θ − lr·wd·θ`) or coupled L2 applies only to
/// parameter kinds that decay: convolution, dense and SVC weights.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &Gradients,
    state: &mut AdamState,
    config: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for i in 0..params.len() {
        if !state.active[i] {
            continue;
        }
        let p = &params.params()[i];
        if grads.get(i).len() != p.data.len() {
            return Err(Error::Shape(format!(
                "gradient for {} has {} entries, expected {}",
                p.name,
                grads.get(i).len(),
                p.data.len()
            )));
        }
        if let Some(j) = grads.get(i).iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {} at index {j}",
                p.name
            )));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c = *config;
    let bias1 = 1.0 - c.beta1.powi(t);
    let bias2 = 1.0 - c.beta2.powi(t);
    for i in 0..params.len() {
        if !state.active[i] {
            continue;
        }
        let decays = params.params()[i].kind.decays() && c.weight_decay != 0.0;
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        let theta = params.data_mut(i);
        for (k, &g0) in grads.get(i).iter().enumerate() {
            let g = if decays && c.coupled_weight_decay {
                g0 + c.weight_decay * theta[k]
            } else {
                g0
            };
            m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g;
            v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g * g;
            if decays && !c.coupled_weight_decay {
                theta[k] -= c.learning_rate * c.weight_decay * theta[k];
            }
            let m_hat = m[k] / bias1;
            let v_hat = v[k] / bias2;
            theta[k] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon);
        }
    }
    Ok(())
}
