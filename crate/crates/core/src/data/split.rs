//! Train/test partitions for the three evaluation protocols.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::corpus::Sample;
use super::manifest::{distinct, Manifest, ManifestRecord};
use crate::error::{Error, Result};
use crate::label::Label;
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Same sensor, same spoof materials in train and test.
    IntraSensorKnown,
    /// Same sensor; test spoofs use materials never seen in training.
    IntraSensorUnknownMaterial,
    /// Train and test captured by different sensors.
    CrossSensor,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::IntraSensorKnown => "intra_sensor_known",
            Protocol::IntraSensorUnknownMaterial => "intra_sensor_unknown_material",
            Protocol::CrossSensor => "cross_sensor",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Protocol::IntraSensorKnown,
            Protocol::IntraSensorUnknownMaterial,
            Protocol::CrossSensor,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown protocol {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub protocol: Protocol,
    pub train_sensors: Vec<String>,
    /// Only for cross-sensor; intra-sensor protocols test on the training
    /// sensors.
    #[serde(default)]
    pub test_sensors: Vec<String>,
    /// Only for the unknown-material protocol.
    #[serde(default)]
    pub held_out_materials: Vec<String>,
    /// Share of each within-sensor stratum used for training.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
}

fn default_train_fraction() -> f64 {
    0.8
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::intra_sensor_known("biometrika")
    }
}

impl SplitSpec {
    pub fn intra_sensor_known(sensor: &str) -> Self {
        SplitSpec {
            protocol: Protocol::IntraSensorKnown,
            train_sensors: vec![sensor.into()],
            test_sensors: Vec::new(),
            held_out_materials: Vec::new(),
            train_fraction: default_train_fraction(),
        }
    }

    pub fn unknown_material(sensor: &str, held_out: &[&str]) -> Self {
        SplitSpec {
            protocol: Protocol::IntraSensorUnknownMaterial,
            held_out_materials: held_out.iter().map(|m| m.to_string()).collect(),
            ..SplitSpec::intra_sensor_known(sensor)
        }
    }

    pub fn cross_sensor(train: &str, test: &str) -> Self {
        SplitSpec {
            protocol: Protocol::CrossSensor,
            test_sensors: vec![test.into()],
            ..SplitSpec::intra_sensor_known(train)
        }
    }

    /// Sensors whose samples the test side draws from.
    pub fn effective_test_sensors(&self) -> &[String] {
        match self.protocol {
            Protocol::CrossSensor => &self.test_sensors,
            _ => &self.train_sensors,
        }
    }
}

/// Tags that protocol splitting looks at.
pub trait Tagged {
    fn id(&self) -> &str;
    fn label(&self) -> Label;
    fn sensor(&self) -> &str;
    fn material(&self) -> &str;
}

impl Tagged for ManifestRecord {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Label {
        self.label
    }
    fn sensor(&self) -> &str {
        &self.sensor
    }
    fn material(&self) -> &str {
        &self.material
    }
}

impl Tagged for Sample {
    fn id(&self) -> &str {
        &self.id
    }
    fn label(&self) -> Label {
        self.label
    }
    fn sensor(&self) -> &str {
        &self.sensor
    }
    fn material(&self) -> &str {
        &self.material
    }
}

fn check_tags(kind: &str, wanted: &[String], available: &[String]) -> Result<()> {
    let missing: Vec<&String> = wanted.iter().filter(|t| !available.contains(t)).collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "unknown {kind} {missing:?}; available: {available:?}"
        )))
    }
}

/// Seeded per-stratum shuffle; returns (train, test) indices.
fn stratified<T: Tagged>(items: &[T], pool: &[usize], fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut strata: BTreeMap<(Label, &str), Vec<usize>> = BTreeMap::new();
    for &i in pool {
        strata
            .entry((items[i].label(), items[i].material()))
            .or_default()
            .push(i);
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for ((label, material), mut idx) in strata {
        idx.sort_by(|&a, &b| items[a].id().cmp(items[b].id()));
        let mut rng = seed::rng(seed::derive(seed, &format!("split/{label}/{material}")));
        idx.shuffle(&mut rng);
        let cut = (idx.len() as f64 * fraction).round() as usize;
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Partitions `items` by protocol. Returned index lists are ascending and
/// disjoint.
pub fn split_indices<T: Tagged>(items: &[T], spec: &SplitSpec, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0, 1), got {}",
            spec.train_fraction
        )));
    }
    if spec.train_sensors.is_empty() {
        return Err(Error::Config("train_sensors is empty".into()));
    }
    let sensors = distinct(items.iter().map(Tagged::sensor));
    let materials = distinct(items.iter().filter(|s| s.label() == Label::Spoof).map(Tagged::material));
    check_tags("sensors", &spec.train_sensors, &sensors)?;
    check_tags("sensors", &spec.test_sensors, &sensors)?;
    check_tags("materials", &spec.held_out_materials, &materials)?;
    if spec.protocol != Protocol::CrossSensor && !spec.test_sensors.is_empty() {
        return Err(Error::Config(format!(
            "test_sensors only applies to {}",
            Protocol::CrossSensor.as_str()
        )));
    }
    if spec.protocol != Protocol::IntraSensorUnknownMaterial && !spec.held_out_materials.is_empty() {
        return Err(Error::Config(format!(
            "held_out_materials only applies to {}",
            Protocol::IntraSensorUnknownMaterial.as_str()
        )));
    }

    let in_sensors = |set: &[String]| -> Vec<usize> {
        (0..items.len())
            .filter(|&i| set.iter().any(|s| s == items[i].sensor()))
            .collect()
    };
    let (train, test) = match spec.protocol {
        Protocol::IntraSensorKnown => stratified(items, &in_sensors(&spec.train_sensors), spec.train_fraction, seed),
        Protocol::IntraSensorUnknownMaterial => {
            if spec.held_out_materials.is_empty() {
                return Err(Error::Config("held_out_materials is empty".into()));
            }
            let pool = in_sensors(&spec.train_sensors);
            let held = |i: usize| spec.held_out_materials.iter().any(|m| m == items[i].material());
            let live: Vec<usize> = pool
                .iter()
                .copied()
                .filter(|&i| items[i].label() == Label::Live)
                .collect();
            let (mut train, mut test) = stratified(items, &live, spec.train_fraction, seed);
            for &i in pool.iter().filter(|&&i| items[i].label() == Label::Spoof) {
                if held(i) {
                    test.push(i);
                } else {
                    train.push(i);
                }
            }
            train.sort_unstable();
            test.sort_unstable();
            (train, test)
        }
        Protocol::CrossSensor => {
            if spec.test_sensors.is_empty() {
                return Err(Error::Config("test_sensors is empty".into()));
            }
            if let Some(s) = spec.train_sensors.iter().find(|s| spec.test_sensors.contains(s)) {
                return Err(Error::Config(format!(
                    "sensor {s:?} is on both sides of a cross-sensor split"
                )));
            }
            (in_sensors(&spec.train_sensors), in_sensors(&spec.test_sensors))
        }
    };
    for (side, idx) in [("train", &train), ("test", &test)] {
        if idx.is_empty() {
            return Err(Error::Invalid(format!(
                "{} split leaves the {side} side empty",
                spec.protocol.as_str()
            )));
        }
    }
    check_split(items, &train, &test, spec)?;
    Ok((train, test))
}

/// Verifies the protocol's disjointness guarantees on a computed split.
pub fn check_split<T: Tagged>(items: &[T], train: &[usize], test: &[usize], spec: &SplitSpec) -> Result<()> {
    let ids: HashSet<&str> = train.iter().map(|&i| items[i].id()).collect();
    if let Some(&i) = test.iter().find(|&&i| ids.contains(items[i].id())) {
        return Err(Error::Invalid(format!(
            "sample {:?} is in both train and test",
            items[i].id()
        )));
    }
    let tags = |idx: &[usize], f: fn(&T) -> &str, spoof_only: bool| -> BTreeSet<String> {
        idx.iter()
            .filter(|&&i| !spoof_only || items[i].label() == Label::Spoof)
            .map(|&i| f(&items[i]).to_string())
            .collect()
    };
    match spec.protocol {
        Protocol::CrossSensor => {
            let (a, b) = (tags(train, T::sensor, false), tags(test, T::sensor, false));
            if let Some(s) = a.intersection(&b).next() {
                return Err(Error::Invalid(format!("sensor {s:?} appears in train and test")));
            }
        }
        Protocol::IntraSensorUnknownMaterial => {
            let (a, b) = (tags(train, T::material, true), tags(test, T::material, true));
            if let Some(m) = a.intersection(&b).next() {
                return Err(Error::Invalid(format!(
                    "spoof material {m:?} appears in train and test"
                )));
            }
        }
        Protocol::IntraSensorKnown => {}
    }
    Ok(())
}

/// Splits a manifest into (train, test) manifests sharing its root.
pub fn build_split(manifest: &Manifest, spec: &SplitSpec, seed: u64) -> Result<(Manifest, Manifest)> {
    let (train, test) = split_indices(&manifest.records, spec, seed)?;
    let pick = |idx: Vec<usize>| {
        Manifest::new(
            &manifest.root,
            idx.into_iter().map(|i| manifest.records[i].clone()).collect(),
        )
    };
    Ok((pick(train)?, pick(test)?))
}

/// Splits in-memory samples into (train, test).
pub fn split_samples(samples: &[Sample], spec: &SplitSpec, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let (train, test) = split_indices(samples, spec, seed)?;
    let pick = |idx: Vec<usize>| idx.into_iter().map(|i| samples[i].clone()).collect();
    Ok((pick(train), pick(test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::CorpusSpec;

    fn manifest() -> Manifest {
        let spec = CorpusSpec {
            n_live: 10,
            n_spoof_per_material: 5,
            sensors: vec!["a".into(), "b".into()],
            materials: vec!["m1".into(), "m2".into(), "m3".into()],
            image_size: 32,
        };
        Manifest::new("", spec.records()).unwrap()
    }

    #[test]
    fn cross_sensor_filters() {
        let (tr, te) = build_split(&manifest(), &SplitSpec::cross_sensor("a", "b"), 0).unwrap();
        assert!(tr.records.iter().all(|r| r.sensor == "a"));
        assert!(te.records.iter().all(|r| r.sensor == "b"));
        assert_eq!(tr.len() + te.len(), 50);
    }

    #[test]
    fn unknown_material_holds_out() {
        let (tr, te) = build_split(&manifest(), &SplitSpec::unknown_material("a", &["m2"]), 0).unwrap();
        assert!(te
            .records
            .iter()
            .filter(|r| r.label == Label::Spoof)
            .all(|r| r.material == "m2"));
        assert!(tr.records.iter().all(|r| r.material != "m2"));
        assert!(tr.records.iter().chain(&te.records).all(|r| r.sensor == "a"));
    }

    #[test]
    fn intra_partition_counts() {
        let m = manifest();
        let (tr, te) = build_split(&m, &SplitSpec::intra_sensor_known("b"), 4).unwrap();
        assert_eq!(tr.len() + te.len(), 25);
        assert_eq!(tr.len(), 20);
        let ids: HashSet<_> = tr.records.iter().map(|r| &r.id).collect();
        assert!(te.records.iter().all(|r| !ids.contains(&r.id)));
        assert_eq!(build_split(&m, &SplitSpec::intra_sensor_known("b"), 4).unwrap().0, tr);
    }

    #[test]
    fn absent_tags_listed() {
        let err = build_split(&manifest(), &SplitSpec::cross_sensor("a", "zz"), 0).unwrap_err();
        assert!(
            err.to_string().contains("zz") && err.to_string().contains("\"b\""),
            "{err}"
        );
        let err = build_split(&manifest(), &SplitSpec::unknown_material("a", &["m9"]), 0).unwrap_err();
        assert!(err.to_string().contains("m9"), "{err}");
        assert!(build_split(&manifest(), &SplitSpec::cross_sensor("a", "a"), 0).is_err());
    }
}
