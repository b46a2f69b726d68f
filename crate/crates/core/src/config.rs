use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::OptimizerKind;

/// Minibatch training settings shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Epochs without validation c-index improvement before stopping. 0 disables early stopping.
    pub patience: usize,
    /// Share of the training records held out for early stopping.
    pub validation_fraction: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    /// Per-modality encoder training: batch 64, lr 0.002, 100 epochs.
    pub fn stage1(seed: u64) -> Self {
        TrainConfig {
            batch_size: 64,
            learning_rate: 0.002,
            epochs: 100,
            patience: 10,
            validation_fraction: 0.1,
            optimizer: OptimizerKind::Adam,
            seed,
        }
    }

    /// Fusion training: batch 8, lr 0.0005, the full 50 epochs. The validation
    /// c-index is still traced per epoch.
    pub fn fusion(seed: u64) -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 0.0005,
            epochs: 50,
            patience: 0,
            validation_fraction: 0.1,
            optimizer: OptimizerKind::Adam,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Mixes a base seed with a salt so sub-tasks get independent streams.
pub fn derive_seed(base: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
