//! Geometric training-time augmentation: rotation, horizontal flip, shear.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub rotation_max_degrees: f64,
    pub horizontal_flip_prob: f64,
    pub shear_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation_max_degrees: 15.0,
            horizontal_flip_prob: 0.5,
            shear_max: 0.1,
        }
    }
}

impl AugmentConfig {
    /// No-op augmentation.
    pub fn none() -> Self {
        AugmentConfig {
            rotation_max_degrees: 0.0,
            horizontal_flip_prob: 0.0,
            shear_max: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.rotation_max_degrees.is_finite()
            && self.rotation_max_degrees >= 0.0
            && (0.0..=1.0).contains(&self.horizontal_flip_prob)
            && self.shear_max.is_finite()
            && self.shear_max >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation {self:?}")))
        }
    }
}

/// Bilinear read with zero outside the image.
fn sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: f64, xx: f64| -> f64 {
        if yy < 0.0 || xx < 0.0 || yy >= h as f64 || xx >= w as f64 {
            0.0
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
        + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0))
}

/// Resamples every plane: output pixel `(y, x)` reads the input at
/// `source(y − cy, x − cx) + (cy, cx)`.
fn warp(image: &Tensor, source: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let [n, c, h, w] = image.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Tensor::zeros(image.shape());
    for i in 0..n {
        for ch in 0..c {
            let src = image.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                for x in 0..w {
                    let (sy, sx) = source(y as f64 - cy, x as f64 - cx);
                    dst[y * w + x] = sample(src, h, w, sy + cy, sx + cx);
                }
            }
        }
    }
    out
}

/// Counter-clockwise rotation about the image centre.
pub fn rotate(image: &Tensor, degrees: f64) -> Tensor {
    let (s, c) = degrees.to_radians().sin_cos();
    warp(image, |y, x| (c * y + s * x, c * x - s * y))
}

/// Horizontal shear `x' = x + factor · y` about the centre.
pub fn shear(image: &Tensor, factor: f64) -> Tensor {
    warp(image, |y, x| (y, x - factor * y))
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let [n, c, h, w] = image.shape();
    let mut out = Tensor::zeros(image.shape());
    for i in 0..n {
        for ch in 0..c {
            let src = image.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                for x in 0..w {
                    dst[y * w + x] = src[y * w + (w - 1 - x)];
                }
            }
        }
    }
    out
}

/// Rotation, then flip, then shear. Three uniforms are always drawn so the
/// stream position does not depend on the config; disabled transforms are
/// skipped exactly.
pub fn augment(image: &Tensor, config: &AugmentConfig, rng: &mut impl Rng) -> Tensor {
    let u_rot: f64 = rng.random();
    let u_flip: f64 = rng.random();
    let u_shear: f64 = rng.random();
    let mut out = image.clone();
    if config.rotation_max_degrees > 0.0 {
        out = rotate(&out, (2.0 * u_rot - 1.0) * config.rotation_max_degrees);
    }
    if u_flip < config.horizontal_flip_prob {
        out = flip_horizontal(&out);
    }
    if config.shear_max > 0.0 {
        out = shear(&out, (2.0 * u_shear - 1.0) * config.shear_max);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn smooth() -> Tensor {
        Tensor::from_fn([1, 1, 32, 32], |i| {
            let (y, x) = (i[2] as f64 - 15.5, i[3] as f64 - 15.5);
            (-(x * x + y * y) / 120.0).exp() * (0.5 + 0.5 * (x / 6.0).cos())
        })
    }

    #[test]
    fn disabled_augmentation_is_identity() {
        let img = smooth();
        let mut rng = seed::rng(1);
        assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng), img);
    }

    #[test]
    fn flip_is_an_involution() {
        let img = smooth().map(|v| v * 3.0 + 1.0);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
        let forced = AugmentConfig {
            horizontal_flip_prob: 1.0,
            ..AugmentConfig::none()
        };
        let once = augment(&img, &forced, &mut seed::rng(2));
        assert_eq!(augment(&once, &forced, &mut seed::rng(3)), img);
    }

    #[test]
    fn rotation_inverts_within_interpolation_error() {
        let img = smooth();
        for deg in [5.0, -12.0, 15.0] {
            let back = rotate(&rotate(&img, deg), -deg);
            let mad = back
                .data()
                .iter()
                .zip(img.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / img.len() as f64;
            assert!(mad <= 0.02, "{deg}: {mad}");
        }
    }

    #[test]
    fn quarter_turn_moves_pixels() {
        let img = Tensor::from_fn([1, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f64);
        let r = rotate(&img, 90.0);
        // counter-clockwise: the right column becomes the top row
        assert!((r.get(0, 0, 0, 0) - 2.0).abs() < 1e-12, "{:?}", r.data());
        assert!((r.get(0, 0, 2, 2) - 6.0).abs() < 1e-12, "{:?}", r.data());
    }

    #[test]
    fn shape_preserved() {
        let img = Tensor::from_fn([1, 1, 16, 24], |i| i[3] as f64);
        let out = augment(&img, &AugmentConfig::default(), &mut seed::rng(4));
        assert_eq!(out.shape(), img.shape());
        assert!(AugmentConfig {
            horizontal_flip_prob: 1.5,
            ..AugmentConfig::default()
        }
        .validate()
        .is_err());
    }
}
