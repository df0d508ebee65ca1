//! Fingerprint presentation attack detection with a depthwise-separable
//! CNN whose last layer is a linear SVC trained end to end by hinge loss.
//!
//! The crate covers the numerical kernels ([`conv`], [`layers`], [`cost`]),
//! the network and its loss ([`model`]), optimization ([`training`]),
//! a synthetic fingerprint corpus with protocol-aware splits ([`data`]),
//! biometric error metrics and DET curves ([`metrics`]), and finite
//! difference gradient checking ([`gradcheck`]).

pub mod conv;
pub mod cost;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod label;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod seed;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use label::Label;
pub use tensor::Tensor;
