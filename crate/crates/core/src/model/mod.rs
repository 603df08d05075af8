//! The attention-over-sentences classifier.
//!
//! For every statute `i` and head `h`, the statute-content embedding forms a
//! query `q = W_q y_i + b_q`, every sentence a key `k_j = W_k x_j + b_k`, and
//! scaled dot products softmaxed over sentences give the attention `alpha`.
//! Head contexts `sum_j alpha_j x_j` are concatenated, passed through a
//! hidden ReLU layer shared across statutes, then through a statute-specific
//! two-way softmax. Training minimizes class-weighted cross-entropy summed
//! over statutes.

mod backward;
mod checkpoint;
mod forward;
mod params;
mod train;

pub use backward::{backward, GradAccumulator};
pub use checkpoint::{Checkpoint, CheckpointHeader, OptimizerInfo, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use forward::{
    attention_weights, class_weight, forward, forward_with, loss, predict, softmax, top_k,
    ForwardTrace, HeadAttention, HeadTrace, Loss, Mode, PredictionSet, Predictor, StatuteQueries,
    StatuteTrace, LOG_FLOOR,
};
pub use params::{AoSParameters, HeadParams, ModelConfig, TensorRef};
pub use train::{train, EpochRecord, Example, TrainOutcome, TrainerOptions};

/// Index of the "statute applies" class in every output distribution.
pub const POSITIVE: usize = 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at statute {statute}{}", head.map(|h| format!(", head {h}")).unwrap_or_default())]
    NonFinite { statute: usize, head: Option<usize> },
    #[error("training diverged at epoch {epoch}, batch {batch}: loss is {loss}")]
    Divergence { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
