use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::network::Plan;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    ConvWeight,
    DenseWeight,
    DenseBias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
    SvcWeight,
    SvcBias,
}

impl ParamKind {
    /// Running statistics are buffers, not optimized parameters.
    pub fn is_trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Weight decay applies to weight matrices and kernels only.
    pub fn decays(self) -> bool {
        matches!(
            self,
            ParamKind::ConvWeight | ParamKind::DenseWeight | ParamKind::SvcWeight
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Every array of the network, in a fixed order determined by the config.
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    params: Vec<Param>,
    pub(crate) plan: Arc<Plan>,
}

impl PartialEq for ModelParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl ModelParams {
    /// Reassembles parameters (for example from a checkpoint), checking
    /// names and shapes against the layout implied by `config`.
    pub fn from_parts(config: ModelConfig, params: Vec<Param>) -> Result<Self> {
        config.validate()?;
        let plan = Plan::new(&config);
        if params.len() != plan.specs.len() {
            return Err(Error::Shape(format!(
                "config implies {} parameter arrays, got {}",
                plan.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in plan.specs.iter().zip(&params) {
            if spec.name != p.name || spec.shape != p.shape || spec.kind != p.kind {
                return Err(Error::Shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    p.name, p.shape, spec.name, spec.shape
                )));
            }
            if p.data.len() != p.shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "parameter {} has a payload of the wrong length",
                    p.name
                )));
            }
        }
        Ok(ModelParams {
            config,
            params,
            plan: Arc::new(plan),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    #[inline]
    pub fn data(&self, index: usize) -> &[f64] {
        &self.params[index].data
    }

    /// Mutable access to one array's values; its shape is fixed.
    #[inline]
    pub fn data_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.params[index].data
    }

    pub fn svc_weight(&self) -> &[f64] {
        self.data(self.plan.svc_weight)
    }

    pub fn svc_bias(&self) -> f64 {
        self.data(self.plan.svc_bias)[0]
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_trainable())
            .map(|p| p.data.len())
            .sum()
    }

    pub(crate) fn plan(&self) -> &Plan {
        &self.plan
    }
}

/// Seeded initialization: kernels and dense weights ~ N(0, 2/fan_in),
/// batchnorm gamma 1 and beta 0, biases and the SVC layer zero.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let plan = Plan::new(config);
    let mut rng = seed::rng(seed::derive(seed, "model-init"));
    let params = plan
        .specs
        .iter()
        .map(|spec| {
            let len = spec.shape.iter().product();
            let data = match spec.kind {
                ParamKind::ConvWeight | ParamKind::DenseWeight => {
                    let normal = Normal::new(0.0, (2.0 / spec.fan_in as f64).sqrt()).expect("fan-in is positive");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                }
                ParamKind::BnGamma | ParamKind::BnRunningVar => vec![1.0; len],
                ParamKind::DenseBias
                | ParamKind::BnBeta
                | ParamKind::BnRunningMean
                | ParamKind::SvcWeight
                | ParamKind::SvcBias => vec![0.0; len],
            };
            Param {
                name: spec.name.clone(),
                kind: spec.kind,
                shape: spec.shape.clone(),
                data,
            }
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        params,
        plan: Arc::new(plan),
    })
}

/// Gradient arrays aligned one-to-one with [`ModelParams::params`]; the
/// entries of non-trainable buffers stay zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    values: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            values: params.params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    pub fn get(&self, index: usize) -> &[f64] {
        &self.values[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.values[index]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub(crate) fn accumulate(&mut self, index: usize, delta: &[f64]) {
        for (g, d) in self.values[index].iter_mut().zip(delta) {
            *g += d;
        }
    }
}
