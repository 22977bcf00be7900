//! Trajectory predictors emitting per-step bivariate-Gaussian forecasts.
//!
//! Two predictors share one output contract: a constant-velocity baseline
//! ([`predict_cv`]) and a toy-scale multi-encoder attention network trained
//! from scratch with hand-written backpropagation ([`forward`], [`train`]),
//! verified against central finite differences ([`grad_check`]).

mod attention;
mod baseline;
mod checkpoint;
mod mat;
mod metrics;
mod network;
#[cfg(test)]
mod tests;
mod train;

pub use attention::{multi_encoder_attention, multi_head, scaled_dot_attention, MhaWeights};
pub use baseline::predict_cv;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use mat::Mat;
pub use metrics::{rmse_ade_fde, DisplacementMetrics};
pub use network::{forward, loss, AttentionWeights, EncoderWeights, FeedForward, Linear};
pub use train::{grad_check, grad_check_detail, train, GradCheckPoint, TrainReport};

use crate::sensing::FusedInput;
use crate::types::Position2D;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("invalid predictor config: {0}")]
    InvalidConfig(String),
    #[error("training needs at least one sample")]
    NoSamples,
    #[error("training diverged (non-finite loss) at step {step}")]
    Diverged { step: usize },
    #[error("metrics need at least one prediction")]
    EmptyInput,
    #[error("prediction/target length mismatch: {pred} vs {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

/// Hyperparameters of the attention predictor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorConfig {
    /// History steps; windows hold `t_h + 1` samples.
    pub t_h: usize,
    /// Forecast steps.
    pub t_f: usize,
    pub d_model: usize,
    pub heads: usize,
    /// Hidden width of the position-wise feed-forward sublayer.
    pub ff_hidden: usize,
    /// Cap on total encoders (target + neighbors).
    pub max_encoders: usize,
    /// Loss weights (w1 for the likelihood term, w2 for the displacement
    /// term); w2 carries the larger weight.
    pub w1: f64,
    pub w2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub train_steps: usize,
    /// Input positions are multiplied by this before embedding.
    pub input_scale: f64,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            t_h: 15,
            t_f: 15,
            d_model: 16,
            heads: 8,
            ff_hidden: 32,
            max_encoders: 5,
            w1: 0.5,
            w2: 1.0,
            learning_rate: 0.01,
            batch_size: 32,
            train_steps: 300,
            input_scale: 0.1,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<(), PredictError> {
        if self.t_h < 1 || self.t_f < 1 {
            return Err(PredictError::InvalidConfig("t_h and t_f must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(PredictError::InvalidConfig(format!(
                "d_model {} must divide by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.max_encoders < 1 {
            return Err(PredictError::InvalidConfig("max_encoders must be >= 1".into()));
        }
        if !(self.w2 > self.w1) {
            return Err(PredictError::InvalidConfig(format!(
                "w2 ({}) must exceed w1 ({})",
                self.w2, self.w1
            )));
        }
        if self.batch_size == 0 || self.train_steps == 0 {
            return Err(PredictError::InvalidConfig(
                "batch_size and train_steps must be >= 1".into(),
            ));
        }
        if !(self.input_scale > 0.0) {
            return Err(PredictError::InvalidConfig("input_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// A fused input window paired with the target's true future positions,
/// expressed in the same frame.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub input: FusedInput,
    pub target: Vec<Position2D>,
}
