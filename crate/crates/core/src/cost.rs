//! Analytical multiply-accumulate cost of standard versus depthwise
//! separable convolution at unit stride with "same" padding.

use serde::{Deserialize, Serialize};

use crate::conv::ConvKind;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvShape {
    /// Kernel extent `D_k`.
    pub kernel: u64,
    /// Input channels `X`.
    pub in_channels: u64,
    /// Output channels `Y`.
    pub out_channels: u64,
    /// Output spatial extent `D_y`.
    pub spatial: u64,
}

impl ConvShape {
    pub fn new(kernel: u64, in_channels: u64, out_channels: u64, spatial: u64) -> Result<Self> {
        if kernel == 0 || in_channels == 0 || out_channels == 0 || spatial == 0 {
            return Err(Error::Config(format!(
                "conv shape extents must be positive: D_k={kernel} X={in_channels} Y={out_channels} D_y={spatial}"
            )));
        }
        Ok(ConvShape {
            kernel,
            in_channels,
            out_channels,
            spatial,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvVariant {
    Standard,
    DepthwiseSeparable,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub mult_adds: u64,
    pub breakdown: Vec<(ConvKind, u64)>,
}

impl CostReport {
    pub fn from_breakdown(breakdown: Vec<(ConvKind, u64)>) -> Self {
        CostReport {
            mult_adds: breakdown.iter().map(|(_, c)| c).sum(),
            breakdown,
        }
    }

    pub fn stage(&self, kind: ConvKind) -> u64 {
        self.breakdown.iter().filter(|(k, _)| *k == kind).map(|(_, c)| c).sum()
    }
}

pub fn flop_cost(shape: ConvShape, variant: ConvVariant) -> CostReport {
    let ConvShape {
        kernel: k,
        in_channels: x,
        out_channels: y,
        spatial: d,
    } = shape;
    match variant {
        ConvVariant::Standard => CostReport::from_breakdown(vec![(ConvKind::Standard, k * k * x * y * d * d)]),
        ConvVariant::DepthwiseSeparable => CostReport::from_breakdown(vec![
            (ConvKind::Depthwise, k * k * x * d * d),
            (ConvKind::Pointwise, x * y * d * d),
        ]),
    }
}

/// Standard cost divided by separable cost. `X` and `D_y` cancel, so this
/// equals `D_k²·Y / (D_k² + Y)`.
pub fn speedup_ratio(shape: ConvShape) -> f64 {
    let standard = flop_cost(shape, ConvVariant::Standard).mult_adds as f64;
    let separable = flop_cost(shape, ConvVariant::DepthwiseSeparable).mult_adds as f64;
    standard / separable
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(k: u64, x: u64, y: u64, d: u64) -> ConvShape {
        ConvShape::new(k, x, y, d).unwrap()
    }

    #[test]
    fn degenerate_extents() {
        let s = shape(3, 1, 1, 1);
        assert_eq!(flop_cost(s, ConvVariant::Standard).mult_adds, 9);
        assert_eq!(flop_cost(s, ConvVariant::DepthwiseSeparable).mult_adds, 10);
    }

    #[test]
    fn mobilenet_sized_layer() {
        let s = shape(3, 32, 64, 56);
        assert_eq!(flop_cost(s, ConvVariant::Standard).mult_adds, 57_802_752);
        let sep = flop_cost(s, ConvVariant::DepthwiseSeparable);
        assert_eq!(sep.stage(ConvKind::Depthwise), 903_168);
        assert_eq!(sep.stage(ConvKind::Pointwise), 6_422_528);
        assert_eq!(sep.mult_adds, 7_325_696);
        let ratio = 57_802_752.0 / 7_325_696.0;
        assert!((speedup_ratio(s) - ratio).abs() < 1e-12);
        assert!((ratio - 7.890_410_958_904_11).abs() < 1e-9);
    }

    #[test]
    fn speedup_examples() {
        assert_eq!(speedup_ratio(shape(1, 5, 1, 4)), 0.5);
        assert!((speedup_ratio(shape(3, 7, 64, 9)) - 576.0 / 73.0).abs() < 1e-12);
        assert_eq!(speedup_ratio(shape(3, 8, 64, 7)), speedup_ratio(shape(3, 512, 64, 112)));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(ConvShape::new(3, 0, 1, 1).is_err());
    }
}
