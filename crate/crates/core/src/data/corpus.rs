use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestRecord, LIVE_MATERIAL};
use super::pgm::{read_image, write_image};
use super::synth::{render, CaptureSpec};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::parallel::par_map;
use crate::seed;
use crate::tensor::Tensor;

/// One fingerprint capture held in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[1, 1, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub label: Label,
    pub sensor: String,
    /// Spoof material, or `"none"` for live captures.
    pub material: String,
}

/// Corpus size and tags. Counts are per sensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub n_live: usize,
    pub n_spoof_per_material: usize,
    pub sensors: Vec<String>,
    pub materials: Vec<String>,
    pub image_size: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_live: 1000,
            n_spoof_per_material: 200,
            sensors: vec!["biometrika".into(), "italdata".into()],
            materials: vec!["ecoflex".into(), "gelatine".into(), "latex".into()],
            image_size: 64,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image_size must be a positive multiple of 32, got {}",
                self.image_size
            )));
        }
        if self.sensors.is_empty() || self.materials.is_empty() {
            return Err(Error::Config(
                "corpus needs at least one sensor and one material".into(),
            ));
        }
        for tag in self.sensors.iter().chain(&self.materials) {
            if tag.is_empty() || tag.contains(['\t', '\n', '/', '-']) || tag == LIVE_MATERIAL {
                return Err(Error::Config(format!("invalid sensor or material tag {tag:?}")));
            }
        }
        for list in [&self.sensors, &self.materials] {
            let mut sorted = list.clone();
            sorted.sort();
            sorted.dedup();
            if sorted.len() != list.len() {
                return Err(Error::Config(format!("duplicate tags in {list:?}")));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.sensors.len() * (self.n_live + self.n_spoof_per_material * self.materials.len())
    }

    /// Manifest records in generation order, with image paths under
    /// `images/`.
    pub fn records(&self) -> Vec<ManifestRecord> {
        let mut out = Vec::with_capacity(self.total());
        for sensor in &self.sensors {
            let mut push = |label, material: &str, tag: &str, i| {
                let id = format!("{sensor}-{tag}-{i:05}");
                out.push(ManifestRecord {
                    path: format!("images/{id}.pgm"),
                    label,
                    sensor: sensor.clone(),
                    material: material.to_string(),
                    id,
                });
            };
            for i in 0..self.n_live {
                push(Label::Live, LIVE_MATERIAL, "live", i);
            }
            for m in &self.materials {
                for i in 0..self.n_spoof_per_material {
                    push(Label::Spoof, m, m, i);
                }
            }
        }
        out
    }
}

/// Rounds to the 256 levels an 8-bit image can hold.
pub fn quantize(image: &Tensor) -> Tensor {
    image.map(|v| (v * 255.0).round() / 255.0)
}

fn render_record(spec: &CorpusSpec, record: &ManifestRecord, seed: u64) -> Tensor {
    quantize(&render(&CaptureSpec {
        size: spec.image_size,
        label: record.label,
        sensor: &record.sensor,
        material: &record.material,
        seed: seed::derive(seed, &record.id),
    }))
}

/// Generates the corpus in memory. Images are quantized exactly as
/// writing and re-reading them would.
pub fn synthesize(spec: &CorpusSpec, seed: u64, workers: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    let records = spec.records();
    Ok(par_map(&records, workers, |r| Sample {
        id: r.id.clone(),
        image: render_record(spec, r, seed),
        label: r.label,
        sensor: r.sensor.clone(),
        material: r.material.clone(),
    }))
}

/// Writes images under `out/images/` and the manifest to
/// `out/manifest.tsv`, creating directories as needed.
pub fn generate_corpus(spec: &CorpusSpec, seed: u64, out: impl AsRef<Path>, workers: usize) -> Result<Manifest> {
    spec.validate()?;
    let out = out.as_ref();
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = Manifest::new(out, spec.records())?;
    par_map(&manifest.records, workers, |r| {
        write_image(&render_record(spec, r, seed), manifest.resolve(r))
    })
    .into_iter()
    .collect::<Result<Vec<()>>>()?;
    manifest.write(out.join("manifest.tsv"))?;
    Ok(manifest)
}

/// Reads every image named by `manifest`.
pub fn load_samples(manifest: &Manifest, workers: usize) -> Result<Vec<Sample>> {
    par_map(&manifest.records, workers, |r| {
        Ok(Sample {
            id: r.id.clone(),
            image: read_image(manifest.resolve(r))?,
            label: r.label,
            sensor: r.sensor.clone(),
            material: r.material.clone(),
        })
    })
    .into_iter()
    .collect()
}
