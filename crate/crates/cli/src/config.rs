use std::fs;
use std::path::{Path, PathBuf};

use padforge::data::{CorpusSpec, SplitSpec};
use padforge::model::ModelConfig;
use padforge::training::TrainConfig;
use padforge::{seed, Error, Result};
use serde::{Deserialize, Serialize};

pub const SEED_ENV: &str = "PADFORGE_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_thresholds: usize,
    /// APCER operating point (%) for the reported BPCER.
    pub apcer_target: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_thresholds: 101,
            apcer_target: 1.0,
            batch_size: 64,
        }
    }
}

/// Everything one run needs. Missing sections take their defaults; the
/// resolved document is written next to each command's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Root of all randomness in the run.
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: CorpusSpec,
    pub split: SplitSpec,
    pub eval: EvalConfig,
    /// Write a checkpoint every this many epochs; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: None,
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            corpus: CorpusSpec::default(),
            split: SplitSpec::default(),
            eval: EvalConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Applies seed precedence: flag, then environment, then config.
    pub fn resolve_seed(&mut self, flag: Option<u64>, env: Option<&str>) -> Result<()> {
        if let Some(s) = flag {
            self.seed = s;
        } else if let Some(v) = env {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn stream(&self, tag: &str) -> u64 {
        seed::derive(self.seed, tag)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("resolved_config.json");
        let text = serde_json::to_string_pretty(self).expect("config serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
