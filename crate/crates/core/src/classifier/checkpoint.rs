//! Model persistence.
//!
//! Checkpoints are JSON: parameters are small enough that a text format
//! costs little, while shortest-round-trip float encoding guarantees that
//! save, load, save reproduces the file byte for byte. A checkpoint carries
//! the feature encoding it was trained with so scoring code can refuse
//! mismatched encodings instead of producing quiet garbage.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureConfig;
use crate::nn::adam::AdamState;

use super::{GenClassifier, TrainConfig, TrainReport};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Serde(#[from] serde_json::Error),
    #[error("checkpoint version {found} not supported (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
}

/// A model plus everything needed to resume or audit its training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub model: GenClassifier,
    /// Optimizer moments, present when the run should be resumable.
    pub optimizer: Option<AdamState>,
    /// Feature encoding the model was trained on.
    pub feature_config: FeatureConfig,
    pub train_config: Option<TrainConfig>,
    pub train_report: Option<TrainReport>,
}

impl Checkpoint {
    pub fn new(model: GenClassifier, feature_config: FeatureConfig) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            model,
            optimizer: None,
            feature_config,
            train_config: None,
            train_report: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let file = File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let file = File::open(path)?;
        let checkpoint: Checkpoint = serde_json::from_reader(BufReader::new(file))?;
        if checkpoint.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion {
                found: checkpoint.version,
                expected: CHECKPOINT_VERSION,
            });
        }
        Ok(checkpoint)
    }
}

#[cfg(test)]
mod tests {
    use super::super::tests::{tiny_config, uniform_prior};
    use super::*;

    fn sample_checkpoint() -> Checkpoint {
        let model = GenClassifier::new(tiny_config(), uniform_prior(), 3).unwrap();
        let mut checkpoint = Checkpoint::new(model, FeatureConfig::default());
        checkpoint.optimizer = Some(AdamState::new());
        checkpoint.train_config = Some(TrainConfig::default());
        checkpoint
    }

    #[test]
    fn round_trip_preserves_every_bit() {
        let dir = tempfile::tempdir().unwrap();
        let path_a = dir.path().join("model.json");
        let path_b = dir.path().join("model2.json");

        let original = sample_checkpoint();
        original.save(&path_a).unwrap();
        let loaded = Checkpoint::load(&path_a).unwrap();
        assert_eq!(original, loaded);

        loaded.save(&path_b).unwrap();
        let bytes_a = std::fs::read(&path_a).unwrap();
        let bytes_b = std::fs::read(&path_b).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut checkpoint = sample_checkpoint();
        checkpoint.version = CHECKPOINT_VERSION + 1;
        checkpoint.save(&path).unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::UnsupportedVersion { .. })
        ));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/model.json")),
            Err(CheckpointError::Io(_))
        ));
    }
}
