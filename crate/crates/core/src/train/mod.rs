//! Training: composite best-of-K objective, schedules, optimizer,
//! checkpoints and the two-stage training loops.

mod checkpoint;
mod engine;
mod loss;
mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{
    canonical_safetensors, load_autoencoder, load_checkpoint, load_pipeline, load_vars, save_autoencoder, save_checkpoint, save_pipeline,
    CheckpointKind, CheckpointMeta, LoadedAutoencoder, LoadedPipeline, CHECKPOINT_VERSION,
};
pub use engine::{
    render_training_maps, train_autoencoder, train_full, AutoencoderHistory, AutoencoderOutputs, EpochRecord, Resume,
    TrainHistory, TrainOutputs,
};
pub use loss::{batch_loss, best_of_k_loss, BatchLoss, LossBreakdown};
pub use optim::Adam;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMinMode {
    /// Select the candidate whose goal is closest to the true endpoint.
    #[default]
    GoalFirst,
    /// Select the candidate minimizing goal + trajectory loss.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_gamma: f64,
    pub epochs: usize,
    pub k: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Epochs over which beta ramps linearly from `beta_min` to `beta_max`.
    pub kl_ramp_epochs: usize,
    pub grad_clip: f64,
    pub loss_min_mode: LossMinMode,
    pub seed: u64,
    pub ae_epochs: usize,
    pub ae_batch_size: usize,
    /// Optional cap on maps used for autoencoder pretraining (evenly
    /// thinned).
    pub ae_max_frames: Option<usize>,
    /// Fraction of each training scene's latest windows held out for
    /// validation.
    pub validation_fraction: f64,
    /// Candidates drawn for validation minADE/minFDE.
    pub val_k: usize,
    /// Use rotated copies of the training scenes for trajectory training
    /// (they are always used for autoencoder pretraining).
    pub augment_rotations: bool,
    /// Optional cap on training windows (evenly subsampled).
    pub max_train_windows: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr0: 1e-3,
            lr_gamma: 0.95,
            epochs: 100,
            k: 20,
            beta_min: 1e-4,
            beta_max: 1.0,
            kl_ramp_epochs: 50,
            grad_clip: 1.0,
            loss_min_mode: LossMinMode::GoalFirst,
            seed: 42,
            ae_epochs: 20,
            ae_batch_size: 32,
            ae_max_frames: None,
            validation_fraction: 0.1,
            val_k: 20,
            augment_rotations: false,
            max_train_windows: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("lr0", self.lr0),
            ("lr_gamma", self.lr_gamma),
            ("k", self.k as f64),
            ("beta_max", self.beta_max),
            ("grad_clip", self.grad_clip),
            ("ae_batch_size", self.ae_batch_size as f64),
            ("val_k", self.val_k as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("train.{name} must be positive, got {v}")));
            }
        }
        if !(0.0..=self.beta_max).contains(&self.beta_min) {
            return Err(Error::Config(format!(
                "train.beta_min must be in [0, beta_max], got {}",
                self.beta_min
            )));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config(format!(
                "train.validation_fraction must be in [0, 1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// KL weight: linear ramp from `beta_min` at epoch 0 to `beta_max` at
/// `kl_ramp_epochs`, constant afterwards.
pub fn kl_weight(epoch: usize, cfg: &TrainConfig) -> f64 {
    if cfg.kl_ramp_epochs == 0 {
        return cfg.beta_max;
    }
    let frac = (epoch as f64 / cfg.kl_ramp_epochs as f64).min(1.0);
    cfg.beta_min + (cfg.beta_max - cfg.beta_min) * frac
}

/// `lr0 * gamma^epoch`.
pub fn learning_rate(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.lr_gamma.powi(epoch as i32)
}
