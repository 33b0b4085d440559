//! Fine-tuning with mini-batch momentum SGD and cross-entropy loss.

mod run;
mod optim;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::zoo::ZooError;

pub use self::run::{augmented, epoch_batches, load_examples, train, validate, EpochRecord, Example, RunOptions, TrainingRun};
pub use self::optim::{cross_entropy, cross_entropy_logits, sgd_momentum_step, OptimizerState, SgdParams, PROB_CLAMP};

pub type TrainResult<T> = Result<T, TrainError>;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}; last good checkpoint: {}", .last_good.as_deref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    Diverged {
        epoch: usize,
        batch: usize,
        last_good: Option<std::path::PathBuf>,
    },
    #[error("non-finite gradient for {param} at epoch {epoch}, batch {batch}")]
    NonFiniteGradient { param: String, epoch: usize, batch: usize },
    #[error("optimizer state for {0} has the wrong shape")]
    StateShape(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ZooError),
    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),
}

/// Which parameters the optimizer updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    /// Fine-tune every layer.
    #[default]
    None,
    /// Update only the new head; frozen batch-norm layers use running statistics.
    BackboneFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Held constant for the whole run.
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub freeze_policy: FreezePolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 10,
            epochs: 20,
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            freeze_policy: FreezePolicy::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdParams<f64> {
        SgdParams {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_protocol() {
        let c = TrainConfig::default();
        assert_eq!((c.batch_size, c.epochs), (10, 20));
        assert_eq!((c.learning_rate, c.momentum, c.weight_decay), (1e-4, 0.9, 5e-4));
        assert_eq!(c.freeze_policy, FreezePolicy::None);
        c.validate().unwrap();
    }

    #[test]
    fn validation_and_hash() {
        let c = TrainConfig::default();
        assert!(TrainConfig { batch_size: 0, ..c }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..c }.validate().is_err());
        assert_ne!(c.hash(), TrainConfig { seed: 1, ..c }.hash());
        assert_eq!(c.hash(), TrainConfig::default().hash());
    }
}
