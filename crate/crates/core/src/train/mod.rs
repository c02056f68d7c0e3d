//! Losses, single-step and two-step training, k-fold cross-validation.

mod data;
mod loss;
mod single;
mod two_step;

pub use data::{flatten_multi, multi_radius_assemble, reshape_multi, trunk_input, TrainData};
pub use loss::{
    data_loss, data_loss_var, ic_loss, ic_loss_var, mean_sample_mse, ode_loss, ode_loss_var,
    relative_l2, total_loss, LossParts, LossWeights,
};
pub use single::{
    batch_gradients, kfold_assign, kfold_train, predict_rows, train_single, validation_mse, write_history_csv,
    CheckpointSink, EpochRecord, FoldReport, TrainConfig, TrainOutcome,
};
pub use two_step::{train_two_step, TrunkBasis, TwoStepOutcome, MIN_SINGULAR_RATIO};

use std::path::Path;

use thiserror::Error;

use crate::datagen::DatasetError;
use crate::nn::NnError;
use crate::physics::PhysicsError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("physics error on row {row}, radius block {block}, window {window}: {source}")]
    Physics {
        row: usize,
        block: usize,
        window: usize,
        #[source]
        source: PhysicsError,
    },
    #[error("non-finite loss at epoch {epoch} (data {}, ode {}, ic {}) on samples {sample_ids:?}", parts.data, parts.ode, parts.ic)]
    NonFinite {
        epoch: usize,
        sample_ids: Vec<usize>,
        parts: LossParts,
    },
    #[error("trunk outputs have no usable singular direction (sigma_max = {sigma_max:e}, latent_dim {latent_dim})")]
    BasisDegenerate { sigma_max: f64, latent_dim: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn io(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}
