//! The two trainable descriptor branches (image patches and local point
//! volumes), the weighted soft-margin triplet loss with exact reverse-mode
//! gradients, Adam, the training loop, checkpoints and a finite-difference
//! gradient checker.
//!
//! Everything is plain f64 on the CPU with hand-derived backward passes;
//! determinism (fixed summation order, seeded init and shuffling) is part
//! of the contract.

mod adam;
mod checkpoint;
mod gradcheck;
mod image_branch;
mod layers;
mod loss;
mod point_branch;
mod tensor;
#[cfg(test)]
mod testkit;
mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{gradient_check, gradient_check_corrupted, GradCheckConfig};
pub use image_branch::{embed_image, ImageArch, ImageEmbedderParams};
pub use layers::l2_normalize;
pub use loss::{backward, triplet_loss, BranchGrads};
pub use point_branch::{embed_points, PointArch, PointEmbedderParams};
pub use tensor::Tensor;
pub use train::{train, train_with, TrainStats, Triplet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("non-finite activation in {stage}")]
    NonFiniteActivation { stage: &'static str },
    #[error("non-finite gradient in {stage}")]
    NonFiniteGradient { stage: &'static str },
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training needs at least 2 pairs from 2 distinct keypoints, got {pairs} pairs / {distinct} keypoints")]
    DatasetTooSmall { pairs: usize, distinct: usize },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Unit-norm D-dimensional embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Descriptor {
    pub values: Vec<f64>,
}

impl Descriptor {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Training hyperparameters. Batch size and epoch count default to
/// desk-scale values; everything here is overridable from config files.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub d: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 5.0,
            learning_rate: 6e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            d: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0) {
            return Err(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.learning_rate > 0.0) {
            return Err(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if ![64, 128, 256].contains(&self.d) {
            return Err(format!("descriptor dimension must be 64, 128 or 256, got {}", self.d));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err("batch_size and epochs must be positive".into());
        }
        Ok(())
    }
}

fn ensure_finite(values: &[f64], stage: &'static str) -> Result<(), NetError> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NetError::NonFiniteActivation { stage })
    }
}
