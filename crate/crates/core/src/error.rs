use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),

    #[error("invalid attention mask: {0}")]
    InvalidMask(String),

    #[error("token id {id} at index {index} is out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        index: usize,
        vocab_size: usize,
    },

    #[error("sequence length {len} exceeds capacity {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("character {0:?} is not in the vocabulary")]
    OutOfAlphabet(char),

    #[error("invalid token id {0}")]
    InvalidTokenId(u32),

    #[error("invalid example: {0}")]
    InvalidExample(String),

    #[error("loss mask selects no positions")]
    EmptyLossMask,

    #[error("empty batch")]
    EmptyBatch,

    #[error("invalid settings: {0}")]
    InvalidSettings(String),

    #[error("stage {stage}: {reason}")]
    StageConfig { stage: String, reason: String },

    #[error("non-finite loss at step {step} of stage {stage}; state dumped to {}", dump.display())]
    NonFiniteLoss {
        stage: String,
        step: u64,
        dump: PathBuf,
    },

    #[error("checkpoint {}: {reason}", path.display())]
    Checkpoint { path: PathBuf, reason: String },

    #[error("missing ancestor checkpoint {}", .0.display())]
    MissingAncestor(PathBuf),

    #[error("decode failed on example {index}: {source}")]
    DecodeAt {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {reason}")]
    ConfigField { path: String, reason: String },

    #[error("config parse error at line {line}, column {column}: {message}")]
    ConfigParse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{0}")]
    Report(String),

    #[error("checkpoint directory {} is locked by another writer", .0.display())]
    Locked(PathBuf),

    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable snake_case identifier of the variant, for machine-readable output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidMask(_) => "invalid_mask",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::SequenceTooLong { .. } => "sequence_too_long",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::OutOfAlphabet(_) => "out_of_alphabet",
            Error::InvalidTokenId(_) => "invalid_token_id",
            Error::InvalidExample(_) => "invalid_example",
            Error::EmptyLossMask => "empty_loss_mask",
            Error::EmptyBatch => "empty_batch",
            Error::InvalidSettings(_) => "invalid_settings",
            Error::StageConfig { .. } => "stage_config",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint { .. } => "checkpoint",
            Error::MissingAncestor(_) => "missing_ancestor",
            Error::DecodeAt { .. } => "decode",
            Error::ConfigField { .. } => "config_field",
            Error::ConfigParse { .. } => "config_parse",
            Error::Report(_) => "report",
            Error::Locked(_) => "locked",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
