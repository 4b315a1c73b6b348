use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the CRG laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("degenerate reference pair: latents are identical")]
    DegeneratePair,

    #[error("degenerate average: mean of unit directions has norm {0:e}")]
    DegenerateAverage(f64),

    #[error("orientation error: attributed mean {mu_a} does not exceed neutral mean {mu_n}")]
    Orientation { mu_n: f64, mu_a: f64 },

    #[error("zero matrix cannot be spectrally normalized")]
    ZeroMatrix,

    #[error("non-finite loss at step {step}: {what}")]
    NonFinite { step: usize, what: String },

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: u32, found: u32 },

    #[error("checkpoint digest mismatch: metadata says {expected}, payload hashes to {actual}")]
    CheckpointDigest { expected: String, actual: String },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint is corrupt: {0}")]
    CheckpointCorrupt(String),

    #[error("checkpoint kind mismatch: expected {expected}, found {found}")]
    CheckpointKind { expected: String, found: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("PNG error: {0}")]
    Png(String),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
