//! Synthetic fingerprint captures.
//!
//! Ridges are `cos(2π f d + φ)` where `d` is the distance to an off-centre
//! core point plus a gentle warp, so the local ridge frequency stays within
//! a few percent of `f`. Pores are small bright dots. Spoofs start from the
//! same kind of ridge base and pass through a material recipe. The sensor
//! contributes a gamma curve on the ridge base and additive noise.

use std::f64::consts::PI;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::label::Label;
use crate::seed;
use crate::tensor::Tensor;

/// Ridge frequency range, cycles per pixel.
pub const RIDGE_FREQUENCY: (f64, f64) = (0.08, 0.12);

/// Degradation applied to a spoof of a given material.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialRecipe {
    /// Gaussian blur sigma in pixels.
    pub blur_sigma: f64,
    /// Contrast scale about mid-grey.
    pub contrast: f64,
    /// Expected dropout blobs per pixel.
    pub dropout_density: f64,
    /// Global brightness shift.
    pub brightness: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensorProfile {
    pub gamma: f64,
    pub noise: f64,
}

const MATERIALS: [(&str, MaterialRecipe); 6] = [
    (
        "ecoflex",
        MaterialRecipe {
            blur_sigma: 1.1,
            contrast: 0.55,
            dropout_density: 0.004,
            brightness: 0.045,
        },
    ),
    (
        "gelatine",
        MaterialRecipe {
            blur_sigma: 0.7,
            contrast: 0.70,
            dropout_density: 0.010,
            brightness: 0.035,
        },
    ),
    (
        "latex",
        MaterialRecipe {
            blur_sigma: 0.9,
            contrast: 0.60,
            dropout_density: 0.002,
            brightness: 0.055,
        },
    ),
    (
        "woodglue",
        MaterialRecipe {
            blur_sigma: 1.3,
            contrast: 0.50,
            dropout_density: 0.006,
            brightness: 0.04,
        },
    ),
    (
        "playdoh",
        MaterialRecipe {
            blur_sigma: 1.6,
            contrast: 0.45,
            dropout_density: 0.012,
            brightness: 0.05,
        },
    ),
    (
        "bodydouble",
        MaterialRecipe {
            blur_sigma: 0.8,
            contrast: 0.65,
            dropout_density: 0.003,
            brightness: 0.04,
        },
    ),
];

const SENSORS: [(&str, SensorProfile); 4] = [
    (
        "biometrika",
        SensorProfile {
            gamma: 0.85,
            noise: 0.03,
        },
    ),
    (
        "italdata",
        SensorProfile {
            gamma: 1.25,
            noise: 0.05,
        },
    ),
    (
        "digitalpersona",
        SensorProfile {
            gamma: 1.0,
            noise: 0.04,
        },
    ),
    (
        "greenbit",
        SensorProfile {
            gamma: 0.7,
            noise: 0.025,
        },
    ),
];

fn unit_from_hash(tag: &str, field: &str) -> f64 {
    (seed::derive(seed::derive(0x6d61_7465_7269_616c, tag), field) >> 11) as f64 / (1u64 << 53) as f64
}

/// Fixed recipe for `material`. Unknown names get a recipe derived from a
/// hash of the name, so it is stable across runs.
pub fn material_recipe(material: &str) -> MaterialRecipe {
    if let Some((_, r)) = MATERIALS.iter().find(|(m, _)| *m == material) {
        return *r;
    }
    let u = |f| unit_from_hash(material, f);
    MaterialRecipe {
        blur_sigma: 0.6 + 1.0 * u("blur"),
        contrast: 0.45 + 0.3 * u("contrast"),
        dropout_density: 0.002 + 0.01 * u("dropout"),
        brightness: 0.035 + 0.02 * u("brightness"),
    }
}

pub fn sensor_profile(sensor: &str) -> SensorProfile {
    if let Some((_, p)) = SENSORS.iter().find(|(s, _)| *s == sensor) {
        return *p;
    }
    let u = |f| unit_from_hash(sensor, f);
    SensorProfile {
        gamma: 0.7 + 0.6 * u("gamma"),
        noise: 0.02 + 0.04 * u("noise"),
    }
}

/// Ridge pattern with pores, values in [0, 1].
fn ridge_base(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let s = size as f64;
    let freq = rng.random_range(RIDGE_FREQUENCY.0..RIDGE_FREQUENCY.1);
    let cx = rng.random_range(-0.5 * s..1.5 * s);
    let cy = rng.random_range(-0.5 * s..1.5 * s);
    let phase = rng.random_range(0.0..2.0 * PI);
    // warp slope amp·2πk stays below 0.1
    let warp_amp = rng.random_range(0.0..2.0);
    let warp_k = rng.random_range(0.005..0.008);
    let warp_dir = rng.random_range(0.0..PI);
    let warp_phase = rng.random_range(0.0..2.0 * PI);
    let (wc, ws) = (warp_dir.cos(), warp_dir.sin());
    let mut img = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let r = ((xf - cx).powi(2) + (yf - cy).powi(2)).sqrt();
            let d = r + warp_amp * (2.0 * PI * warp_k * (xf * wc + yf * ws) + warp_phase).sin();
            img[y * size + x] = 0.5 + 0.5 * (2.0 * PI * freq * d + phase).cos();
        }
    }
    let pores = (0.004 * s * s).round() as usize;
    for _ in 0..pores {
        let px = rng.random_range(0.0..s);
        let py = rng.random_range(0.0..s);
        stamp(&mut img, size, px, py, 0.7, |v, w| v + 0.35 * w);
    }
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    img
}

/// Applies `f(value, weight)` with a Gaussian weight around `(px, py)`.
fn stamp(img: &mut [f64], size: usize, px: f64, py: f64, sigma: f64, f: impl Fn(f64, f64) -> f64) {
    let reach = (3.0 * sigma).ceil() as isize;
    let (ix, iy) = (px as isize, py as isize);
    for y in (iy - reach).max(0)..=(iy + reach).min(size as isize - 1) {
        for x in (ix - reach).max(0)..=(ix + reach).min(size as isize - 1) {
            let d2 = (x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2);
            let w = (-d2 / (2.0 * sigma * sigma)).exp();
            let i = y as usize * size + x as usize;
            img[i] = f(img[i], w);
        }
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
fn gaussian_blur(img: &[f64], size: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return img.to_vec();
    }
    let reach = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-reach..=reach)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let clamp = |v: isize| v.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; img.len()];
    let mut out = vec![0.0; img.len()];
    for y in 0..size {
        for x in 0..size {
            tmp[y * size + x] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * img[y * size + clamp(x as isize + t as isize - reach)])
                .sum::<f64>()
                / norm;
        }
    }
    for y in 0..size {
        for x in 0..size {
            out[y * size + x] = taps
                .iter()
                .enumerate()
                .map(|(t, w)| w * tmp[clamp(y as isize + t as isize - reach) * size + x])
                .sum::<f64>()
                / norm;
        }
    }
    out
}

/// Scales deviations from the image mean.
fn scale_contrast(img: &mut [f64], factor: f64) {
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    img.iter_mut().for_each(|v| *v = mean + factor * (*v - mean));
}

fn degrade(img: &mut Vec<f64>, size: usize, recipe: &MaterialRecipe, rng: &mut ChaCha8Rng) {
    *img = gaussian_blur(img, size, recipe.blur_sigma);
    scale_contrast(img, recipe.contrast * rng.random_range(0.9..1.05));
    let blobs = recipe.dropout_density * (size * size) as f64;
    let count = blobs.floor() as usize + usize::from(rng.random_bool(blobs.fract()));
    for _ in 0..count {
        let px = rng.random_range(0.0..size as f64);
        let py = rng.random_range(0.0..size as f64);
        let sigma = rng.random_range(1.0..2.5);
        stamp(img, size, px, py, sigma, |v, w| v + w * (0.75 - v));
    }
}

/// Parameters of one capture; the sample seed fixes every random draw.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureSpec<'a> {
    pub size: usize,
    pub label: Label,
    pub sensor: &'a str,
    pub material: &'a str,
    pub seed: u64,
}

/// Renders one `[1, 1, size, size]` capture with values in [0, 1].
///
/// The ridge base depends only on `seed`, so captures that differ only in
/// label or material share the same underlying finger.
pub fn render(spec: &CaptureSpec<'_>) -> Tensor {
    let size = spec.size;
    let profile = sensor_profile(spec.sensor);
    let mut finger = seed::rng(seed::derive(spec.seed, "finger"));
    let mut img = ridge_base(size, &mut finger);
    img.iter_mut().for_each(|v| *v = v.powf(profile.gamma));
    let mut rng = seed::rng(seed::derive(spec.seed, "capture"));
    let jitter = rng.random_range(-0.05..0.05);
    match spec.label {
        Label::Live => {
            let contrast = rng.random_range(0.85..1.0);
            scale_contrast(&mut img, contrast);
            img.iter_mut().for_each(|v| *v += jitter);
        }
        Label::Spoof => {
            let recipe = material_recipe(spec.material);
            degrade(&mut img, size, &recipe, &mut rng);
            img.iter_mut().for_each(|v| *v += recipe.brightness + jitter);
        }
    }
    let noise = Normal::new(0.0, profile.noise).expect("noise level is finite and non-negative");
    for v in img.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Tensor::from_vec([1, 1, size, size], img).expect("size matches")
}

/// Radially binned magnitude spectrum of an image; returns the frequency
/// (cycles/pixel) with the most energy, ignoring DC.
pub fn dominant_frequency(image: &Tensor) -> f64 {
    let (h, w) = (image.height(), image.width());
    let data = image.plane(0, 0);
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    let bins = h.min(w) / 2;
    let mut energy = vec![0.0; bins + 1];
    for u in 0..h {
        for v in 0..w {
            let fu = if u <= h / 2 { u as f64 } else { u as f64 - h as f64 } / h as f64;
            let fv = if v <= w / 2 { v as f64 } else { v as f64 - w as f64 } / w as f64;
            let radius = (fu * fu + fv * fv).sqrt();
            let bin = (radius * h.min(w) as f64).round() as usize;
            if bin == 0 || bin > bins {
                continue;
            }
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let a = -2.0 * PI * (fu * y as f64 + fv * x as f64);
                    let p = data[y * w + x] - mean;
                    re += p * a.cos();
                    im += p * a.sin();
                }
            }
            energy[bin] += re * re + im * im;
        }
    }
    let peak = (1..=bins).max_by(|&a, &b| energy[a].total_cmp(&energy[b])).unwrap_or(1);
    peak as f64 / h.min(w) as f64
}
