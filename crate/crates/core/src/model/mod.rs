//! Network configuration, construction, forward pass and checkpoints.

mod checkpoint;
mod config;
mod net;

use std::path::PathBuf;

use thiserror::Error;

use crate::nn::NnError;

pub use checkpoint::{
    checkpoint_bytes, checkpoint_from_bytes, load_checkpoint, save_checkpoint, CheckpointMeta, CHANNEL_ORDER_VERSION, CHECKPOINT_MAGIC,
    FORMAT_VERSION,
};
pub use config::{default_stages, scale_channels, ModelConfig, Operator, StageSpec};
pub use net::{Bottleneck, ConvBn, DvpNet, StatsMode};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("expected input N×3×{expected}×{expected}, got {got:?}")]
    InputShape { expected: usize, got: Vec<usize> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}
