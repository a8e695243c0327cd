use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid architecture at layer {layer}: {reason}")]
    InvalidArchitecture { layer: usize, reason: String },

    #[error("shape mismatch at {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        context: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("architecture fingerprint mismatch: expected {expected:#018x}, found {found:#018x}")]
    FingerprintMismatch { expected: u64, found: u64 },

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("learning rate must be positive and finite, got {0}")]
    InvalidLearningRate(f64),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: String,
        expected: u32,
        found: u32,
    },

    #[error("truncated {what}: expected {expected} bytes, found {found}")]
    Truncated {
        what: String,
        expected: u64,
        found: u64,
    },

    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("invalid split: {0}")]
    InvalidSplit(String),

    #[error("class {class} needs {needed} labeled examples but only {available} are available")]
    InsufficientClassExamples {
        class: usize,
        needed: usize,
        available: usize,
    },

    #[error("participant count {requested} outside [1, {available}]")]
    InvalidParticipation { requested: usize, available: usize },

    #[error("cannot aggregate an empty list of parameter sets")]
    EmptyAggregation,

    #[error("splice cutoff {cutoff} invalid for {total} parameterized layers")]
    InvalidSplice { cutoff: usize, total: usize },

    #[error("client {client} has no labeled examples")]
    EmptyLabeled { client: usize },

    #[error("client {client} has no unlabeled examples")]
    EmptyUnlabeled { client: usize },

    #[error("{predictions} predictions for {examples} examples")]
    AlignmentMismatch { predictions: usize, examples: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("metrics line {line}: {message}")]
    Metrics { line: u64, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("gradient check failed: relative error {error:.3e} is not below {tolerance:e}")]
    GradientCheck { error: f64, tolerance: f64 },
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Whether the error stems from user configuration rather than a runtime failure.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config { .. } | Error::InvalidSplit(_) | Error::InvalidSplice { .. }
        )
    }
}
