//! Merged run configuration: an optional TOML file overlaid by flags.
//!
//! Every invocation resolves to one effective [`RunConfig`]. Its SHA-256
//! (over compact canonical JSON) is stamped into every artifact the
//! invocation writes, so any two outputs can be checked for having come
//! from the same settings without diffing them field by field.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use canids_core::classifier::{ModelConfig, TrainConfig};
use canids_core::features::FeatureConfig;
use canids_core::ingest::LogFormat;
use canids_core::synth::SynthConfig;
use canids_core::ClassLabel;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// How capture files on disk are labeled.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LogSection {
    /// `synthetic` (one flag token per class) or `car_hacking`
    /// (`R`/`T` flags).
    pub format: String,
    /// Which attack a `T` flag means in a `car_hacking` capture. Unset,
    /// the attack is inferred from the input file name when possible.
    pub attack_label: Option<String>,
}

impl Default for LogSection {
    fn default() -> LogSection {
        LogSection {
            format: "synthetic".to_string(),
            attack_label: None,
        }
    }
}

/// Train/test carving and class balancing, applied at training time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Train-to-test frame ratio for `split`.
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Frames per attack subset when balancing; 0 trains on everything.
    pub per_attack: usize,
    /// Normal-to-attack ratio inside each balanced subset.
    pub normal_ratio: f64,
}

impl Default for DatasetSection {
    fn default() -> DatasetSection {
        DatasetSection {
            split_ratio: 3.0,
            split_seed: 0,
            per_attack: 0,
            normal_ratio: 2.0,
        }
    }
}

/// Prediction-time sampling settings shared by `predict` and `eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringSection {
    /// Importance-sample count per class; unset, the checkpoint's own
    /// setting applies.
    pub k: Option<usize>,
    pub seed: u64,
}

impl Default for ScoringSection {
    fn default() -> ScoringSection {
        ScoringSection { k: None, seed: 0 }
    }
}

/// The complete effective configuration of one invocation. Every field has
/// a default; a config file and flags only override pieces of it.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub log: LogSection,
    /// Feature encoding. `None` means: the default for training, the
    /// checkpoint's stored encoding for prediction and evaluation.
    pub features: Option<FeatureConfig>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetSection,
    pub synth: SynthConfig,
    pub scoring: ScoringSection,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                toml::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }

    /// The capture format to parse inputs with.
    pub fn log_format(&self) -> Result<LogFormat> {
        match self.log.format.as_str() {
            "synthetic" => Ok(LogFormat::synthetic()),
            "car_hacking" => Ok(LogFormat::car_hacking(self.attack_label()?)),
            other => bail!("unknown log format {other:?}; expected synthetic or car_hacking"),
        }
    }

    pub fn attack_label(&self) -> Result<Option<ClassLabel>> {
        match &self.log.attack_label {
            None => Ok(None),
            Some(name) => {
                let label = ClassLabel::from_name(name)
                    .with_context(|| format!("unknown class label {name:?}"))?;
                if !label.is_attack() {
                    bail!("attack_label must name an attack, not {name:?}");
                }
                Ok(Some(label))
            }
        }
    }
}

/// Hex SHA-256 of the effective configuration's canonical JSON form.
pub fn config_hash(config: &RunConfig) -> String {
    let canonical = serde_json::to_vec(config).expect("config serializes");
    let digest = Sha256::digest(&canonical);
    let mut hex = String::with_capacity(64);
    for byte in digest {
        write!(hex, "{byte:02x}").unwrap();
    }
    hex
}
