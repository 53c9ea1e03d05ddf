//! One-dimensional residual convolutional classifier trained from scratch.

mod adam;
mod config;
pub mod layers;
mod network;
mod params;
mod schedule;
mod train;
pub mod weights;

pub use adam::{adam_update, AdamHyper};
pub use config::{conv_out_len, NetConfig, TrainConfig};
pub use network::{ClassProbs, LossGrad, Mode, Network, RunningStats};
pub use params::{AdamState, Gradients, ModelParams, ParamKind, Tensor};
pub use schedule::{EpochDecision, PlateauScheduler};
pub use train::{
    epoch_order, mean_loss, predict, train, train_with_validator, EpochRecord, ExamSource,
    TrainOutcome, VecSource,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("shape mismatch at {layer}: {detail}")]
    Shape { layer: String, detail: String },
    #[error("non-finite values at layer {index} ({layer})")]
    NonFinite { index: usize, layer: String },
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("label {label} out of range for {n_classes} classes")]
    Label { label: usize, n_classes: usize },
    #[error("weight file: {0}")]
    Format(String),
    #[error("exam source: {0}")]
    Source(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NetError>;
