//! The CNN regressor: from-scratch forward/backward passes over stacked
//! feature planes, Adam optimization, and single- or joint-target training.
//!
//! Layers are generic over the float type: training runs at f32, while the
//! finite-difference gradient tests instantiate the same code at f64.

mod adam;
mod checkpoint;
mod layers;
mod model;
mod train;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use layers::{col2im, im2col, Conv2d, Dense, Grads, Layer, LayerGrads, Value};
pub use model::{
    build_model, loss_and_grad, ArchConfig, Cache, Mode, Model, TargetMode, TargetScaler,
};
pub use train::{
    grid_search, train, EpochStats, GridAxes, GridResult, SampleSource, TrainConfig, TrainSignal,
    VecSource,
};

use thiserror::Error;

#[derive(Error, Debug)]
pub enum NnError {
    #[error("layer {layer} cannot consume input of shape {shape:?}: {reason}")]
    BadShape { layer: usize, shape: Vec<usize>, reason: String },
    #[error("training diverged at epoch {epoch} (lr {lr:.3e})")]
    Diverged { epoch: usize, lr: f64 },
    #[error("non-finite gradient encountered at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint {path}: {reason}")]
    BadCheckpoint { path: String, reason: String },
    #[error("missing normalization constants for {0}")]
    MissingScaler(&'static str),
}

#[cfg(test)]
mod tests;
