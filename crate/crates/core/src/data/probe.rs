//! Pixel-space logistic regression baseline.

use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use crate::error::{Error, Result};
use crate::label::Label;
use crate::metrics::{compute_metrics_from_labels, MetricsReport};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Images are average-pooled to `grid × grid` before fitting.
    pub grid: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            grid: 16,
            iterations: 500,
            learning_rate: 0.5,
            l2: 3e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub grid: usize,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub weights: Vec<f64>,
    pub bias: f64,
}

/// Averages `factor × factor` cells of a square single-channel image.
pub fn downsample(sample: &Sample, grid: usize) -> Result<Vec<f64>> {
    let (h, w) = (sample.image.height(), sample.image.width());
    if grid == 0 || h != w || h % grid != 0 {
        return Err(Error::Shape(format!("cannot pool a {h}x{w} image to {grid}x{grid}")));
    }
    let f = h / grid;
    let plane = sample.image.plane(0, 0);
    let mut out = vec![0.0; grid * grid];
    for y in 0..h {
        for x in 0..w {
            out[(y / f) * grid + x / f] += plane[y * w + x];
        }
    }
    let area = (f * f) as f64;
    out.iter_mut().for_each(|v| *v /= area);
    Ok(out)
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl LinearProbe {
    /// Full-batch gradient descent on the L2-regularized logistic loss over
    /// standardized pooled pixels; live is the positive class.
    pub fn fit(samples: &[Sample], config: &ProbeConfig) -> Result<Self> {
        if !samples.iter().any(|s| s.label == Label::Live) || !samples.iter().any(|s| s.label == Label::Spoof) {
            return Err(Error::Invalid(
                "probe training needs both live and spoof samples".into(),
            ));
        }
        let x: Vec<Vec<f64>> = samples
            .iter()
            .map(|s| downsample(s, config.grid))
            .collect::<Result<_>>()?;
        let y: Vec<f64> = samples
            .iter()
            .map(|s| f64::from(u8::from(s.label == Label::Live)))
            .collect();
        let d = config.grid * config.grid;
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        for row in &x {
            mean.iter_mut().zip(row).for_each(|(m, v)| *m += v / n);
        }
        let mut scale = vec![0.0; d];
        for row in &x {
            scale
                .iter_mut()
                .zip(row.iter().zip(&mean))
                .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
        }
        scale.iter_mut().for_each(|s| *s = 1.0 / s.sqrt().max(1e-8));
        let z: Vec<Vec<f64>> = x
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&scale)
                    .map(|((v, m), s)| (v - m) * s)
                    .collect()
            })
            .collect();
        let mut w = vec![0.0; d];
        let mut b = 0.0;
        for _ in 0..config.iterations {
            let mut gw: Vec<f64> = w.iter().map(|wi| config.l2 * wi).collect();
            let mut gb = 0.0;
            for (row, &t) in z.iter().zip(&y) {
                let p = sigmoid(row.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() + b);
                let r = (p - t) / n;
                gw.iter_mut().zip(row).for_each(|(g, v)| *g += r * v);
                gb += r;
            }
            w.iter_mut()
                .zip(&gw)
                .for_each(|(wi, g)| *wi -= config.learning_rate * g);
            b -= config.learning_rate * gb;
        }
        Ok(LinearProbe {
            grid: config.grid,
            mean,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn decision(&self, sample: &Sample) -> Result<f64> {
        let x = downsample(sample, self.grid)?;
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .zip(&self.weights)
            .map(|(((v, m), s), w)| (v - m) * s * w)
            .sum::<f64>()
            + self.bias)
    }

    pub fn predict(&self, sample: &Sample) -> Result<Label> {
        Ok(if self.decision(sample)? > 0.0 {
            Label::Live
        } else {
            Label::Spoof
        })
    }

    pub fn evaluate(&self, samples: &[Sample]) -> Result<MetricsReport> {
        let predicted: Vec<Label> = samples.iter().map(|s| self.predict(s)).collect::<Result<_>>()?;
        let truth: Vec<Label> = samples.iter().map(|s| s.label).collect();
        compute_metrics_from_labels(&predicted, &truth)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn flat(id: usize, value: f64, label: Label) -> Sample {
        Sample {
            id: id.to_string(),
            image: Tensor::filled([1, 1, 32, 32], value),
            label,
            sensor: "s".into(),
            material: if label == Label::Live { "none" } else { "m" }.into(),
        }
    }

    #[test]
    fn separates_brightness() {
        let s: Vec<Sample> = (0..20)
            .map(|i| {
                flat(
                    i,
                    0.2 + 0.01 * i as f64 + if i % 2 == 0 { 0.3 } else { 0.0 },
                    if i % 2 == 0 { Label::Live } else { Label::Spoof },
                )
            })
            .collect();
        let probe = LinearProbe::fit(&s, &ProbeConfig::default()).unwrap();
        assert!(probe.evaluate(&s).unwrap().accuracy >= 90.0);
    }

    #[test]
    fn downsample_averages() {
        let mut s = flat(0, 0.0, Label::Live);
        s.image = Tensor::from_fn([1, 1, 32, 32], |i| (i[3] % 2) as f64);
        assert!(downsample(&s, 16).unwrap().iter().all(|&v| v == 0.5));
        assert!(downsample(&s, 5).is_err());
    }
}
