//! Corpus generation: design of experiments, ground-truth trajectories,
//! train/validation split, and the on-disk dataset format.

mod doe;
mod sample;
mod store;

pub use doe::{build_doe, default_horizon, DoePoint, DoeSpec, LevelRange};
pub use sample::{
    generate_corpus, generate_sample, split, DatasetSample, SampleMeta, SampleStatus, Split,
    GENERATOR_VERSION,
};
pub use store::{
    read_dataset, write_dataset, write_manifest, Dataset, DatasetManifest, ManifestEntry,
    FORMAT_VERSION,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset request: {0}")]
    Invalid(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checksum mismatch for sample {id}")]
    Checksum { id: usize },
    #[error("sample {id} blob truncated: need {needed} bytes at offset {offset}, file has {len}")]
    Truncated {
        id: usize,
        offset: u64,
        needed: u64,
        len: u64,
    },
    #[error("unsupported dataset format_version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("unknown sample id {0}")]
    UnknownSample(usize),
    #[error("sample {id} is marked failed: {reason}")]
    FailedSample { id: usize, reason: String },
}

impl DatasetError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DatasetError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
