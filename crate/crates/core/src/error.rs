use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum DiscoError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid dataset: {0}")]
    Dataset(String),

    #[error("duplicate annotation: annotator `{annotator}` labeled item `{item}` more than once")]
    DuplicateRecord { item: String, annotator: String },

    #[error("label `{label}` on item `{item}` is not in the declared label space")]
    UnknownLabel { item: String, label: String },

    #[error("invalid label space: {0}")]
    LabelSpace(String),

    #[error("label space is not ordinal; {0} requires ordered label values")]
    NotOrdinal(&'static str),

    #[error("unknown split `{0}` (expected train, dev or test)")]
    UnknownSplit(String),

    #[error("missing features for `{0}`")]
    MissingId(String),

    #[error("feature file: {0}")]
    Features(String),

    #[error("dimension mismatch: {what} expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("histogram for {0} has no supporting annotations")]
    EmptyHistogram(String),

    #[error("missing prediction for item `{item}`{}", annotator.as_ref().map(|a| format!(", annotator `{a}`")).unwrap_or_default())]
    MissingPrediction {
        item: String,
        annotator: Option<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{0}")]
    Empty(String),
}

pub type Result<T> = std::result::Result<T, DiscoError>;

impl DiscoError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DiscoError::Io {
            path: path.into(),
            source,
        }
    }
}
