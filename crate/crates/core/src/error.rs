use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("schema error in {path} at row {row}: expected {expected} columns, found {found}")]
    Schema {
        path: PathBuf,
        row: usize,
        expected: usize,
        found: usize,
    },

    #[error("parse error in {path} at row {row}, column {column}: {value:?} is not a number")]
    Parse {
        path: PathBuf,
        row: usize,
        column: usize,
        value: String,
    },

    #[error("cannot split {available} samples into {parts} non-empty parts")]
    EmptyPart { available: usize, parts: usize },

    #[error("device {device}: class {class} required for the {part} part but none is available")]
    MissingClass {
        device: String,
        class: &'static str,
        part: &'static str,
    },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("architecture mismatch between aggregated models")]
    ArchitectureMismatch,

    #[error("{0} must not be empty")]
    Empty(&'static str),

    #[error("operation requires a {expected} model, got a {found} model")]
    ModelKind {
        expected: &'static str,
        found: &'static str,
    },

    #[error("missing label on sample {seq_index}")]
    MissingLabel { seq_index: u64 },

    #[error("non-finite update{}", client.map(|c| format!(" from client {c}")).unwrap_or_default())]
    PoisonedUpdate { client: Option<usize> },

    #[error("s-resampling exceeded {0} draws for one slot")]
    ResampleExhausted(u64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Csv { .. } => "csv",
            Error::Schema { .. } => "schema",
            Error::Parse { .. } => "parse",
            Error::EmptyPart { .. } => "empty_part",
            Error::MissingClass { .. } => "missing_class",
            Error::DimensionMismatch { .. } => "dimension_mismatch",
            Error::ArchitectureMismatch => "architecture_mismatch",
            Error::Empty(_) => "empty",
            Error::ModelKind { .. } => "model_kind",
            Error::MissingLabel { .. } => "missing_label",
            Error::PoisonedUpdate { .. } => "poisoned_update",
            Error::ResampleExhausted(_) => "resample_exhausted",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
