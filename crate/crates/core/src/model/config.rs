use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::BatchNormConfig;

/// Width of the feature vector fed to the SVC layer.
pub const FEATURE_WIDTH: usize = 256;

/// Number of max-pool halvings in the extractor.
pub const DOWNSAMPLING_BLOCKS: usize = 5;

/// Channel ladder before the width multiplier: stem output, then the
/// output of each of the five blocks.
pub const BASE_CHANNELS: [usize; DOWNSAMPLING_BLOCKS + 1] = [32, 64, 128, 256, 512, 1024];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub input_channels: usize,
    pub width_multiplier: f64,
    pub kernel_size: usize,
    /// Depthwise/pointwise pairs per block; the first pair of a block
    /// widens the channels, the rest keep them.
    pub block_repeats: [usize; DOWNSAMPLING_BLOCKS],
    /// Width of the first dense layer after global average pooling.
    pub hidden_width: usize,
    pub svc_c: f64,
    pub batchnorm: BatchNormConfig,
}

impl Default for ModelConfig {
    /// Full-size network: 224×224 grayscale input, MobileNet-V1 widths.
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            input_channels: 1,
            width_multiplier: 1.0,
            kernel_size: 3,
            block_repeats: [1, 2, 2, 6, 2],
            hidden_width: 512,
            svc_c: 1.0,
            batchnorm: BatchNormConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset used for the synthetic end-to-end runs.
    pub fn toy() -> Self {
        ModelConfig {
            input_size: 64,
            width_multiplier: 0.25,
            block_repeats: [1; DOWNSAMPLING_BLOCKS],
            ..Self::default()
        }
    }

    /// Smallest preset, sized for whole-network gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            width_multiplier: 0.125,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        let factor = 1 << DOWNSAMPLING_BLOCKS;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return fail(format!(
                "input_size {} must be a positive multiple of {factor} (five 2x2 poolings)",
                self.input_size
            ));
        }
        if self.input_channels == 0 {
            return fail("input_channels must be at least 1".into());
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return fail(format!("width_multiplier {} must lie in (0, 1]", self.width_multiplier));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return fail(format!("kernel_size {} must be odd", self.kernel_size));
        }
        if self.block_repeats.contains(&0) {
            return fail("every block needs at least one depthwise/pointwise pair".into());
        }
        if self.hidden_width == 0 {
            return fail("hidden_width must be positive".into());
        }
        if !(self.svc_c > 0.0 && self.svc_c.is_finite()) {
            return fail(format!("svc_c {} must be positive", self.svc_c));
        }
        let bn = self.batchnorm;
        if bn.epsilon.is_nan() || bn.epsilon <= 0.0 || !(0.0..1.0).contains(&bn.momentum) {
            return fail(format!(
                "batchnorm epsilon {} / momentum {} out of range",
                bn.epsilon, bn.momentum
            ));
        }
        Ok(())
    }

    /// Channel ladder after applying the width multiplier.
    pub fn channels(&self) -> [usize; DOWNSAMPLING_BLOCKS + 1] {
        BASE_CHANNELS.map(|c| ((c as f64 * self.width_multiplier).round() as usize).max(1))
    }

    /// Shape of the last extractor activation for a batch of `n`.
    pub fn extractor_output_shape(&self, n: usize) -> [usize; 4] {
        let side = self.input_size >> DOWNSAMPLING_BLOCKS;
        [n, self.channels()[DOWNSAMPLING_BLOCKS], side, side]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::default().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn full_size_extractor_is_1024_by_7x7() {
        assert_eq!(ModelConfig::default().extractor_output_shape(2), [2, 1024, 7, 7]);
    }

    #[test]
    fn toy_channel_ladder() {
        assert_eq!(ModelConfig::toy().channels(), [8, 16, 32, 64, 128, 256]);
        assert_eq!(ModelConfig::tiny().channels(), [4, 8, 16, 32, 64, 128]);
        assert_eq!(ModelConfig::toy().extractor_output_shape(3), [3, 256, 2, 2]);
    }

    #[test]
    fn rejects_sizes_that_do_not_pool_cleanly() {
        for size in [0, 56, 100] {
            let cfg = ModelConfig {
                input_size: size,
                ..ModelConfig::toy()
            };
            assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{size}");
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<ModelConfig>(r#"{"input_size": 64, "bogus": 1}"#).is_err());
        let cfg: ModelConfig = serde_json::from_str(r#"{"input_size": 64}"#).unwrap();
        assert_eq!(cfg.width_multiplier, 1.0);
    }
}
