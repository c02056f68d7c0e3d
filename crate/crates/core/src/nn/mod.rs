//! Operator network: dense and Rowdy layers, the branch/trunk pair with a
//! softplus output gate, reverse-mode gradients, Adam, and checkpoints.

mod adam;
mod checkpoint;
mod network;
mod tape;

pub use adam::{AdamConfig, AdamState, RowAdam};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, TensorEntry, CHECKPOINT_VERSION,
};
pub use network::{
    combine, gate_array, output_gate, time_column, Activation, Architecture, BoundNet, DenseLayer,
    Layer, LayerAct, NetOutput, NetworkParams, RowdyParams, Trainable,
};
pub use tape::{
    logistic, rowdy_scalar, rowdy_scalar_deriv, softplus, Gradients, Tape, Var, ROWDY_SCALE,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("value belongs to a different tape")]
    ForeignVar,
    #[error("value was not recorded as trainable")]
    NotTrainable,
    #[error("loss does not depend on any trainable value")]
    NoGradPath,
    #[error("backward needs a 1×1 loss, got {0:?}")]
    NotScalar((usize, usize)),
    #[error("row index {index} out of range for {len} rows")]
    Index { index: usize, len: usize },
    #[error("invalid Rowdy parameters: {0}")]
    Rowdy(String),
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("checkpoint i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint tensor data failed its checksum")]
    Checksum,
    #[error("checkpoint tensor data truncated: need {needed} bytes, have {len}")]
    Truncated { needed: u64, len: u64 },
    #[error("unsupported checkpoint format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
}
