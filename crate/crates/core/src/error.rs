use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // ingestion
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("malformed header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },
    #[error("length mismatch in {path}: header declares {declared} samples, payload holds {found}")]
    LengthMismatch { path: PathBuf, declared: usize, found: usize },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error("subject {subject} has no {state} records required by the split mode")]
    MissingState { subject: String, state: String },
    #[error("class {0} has no segments to augment")]
    EmptyClass(String),

    // signal processing
    #[error("invalid cutoff: {0}")]
    InvalidCutoff(String),
    #[error("filter design produced an unstable result: {0}")]
    UnstableResult(String),
    #[error("degenerate signal: standard deviation {0:e} below tolerance")]
    DegenerateSignal(f64),

    // tensors / training
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("only {available} classes available, batch needs {needed}")]
    TooFewClasses { available: usize, needed: usize },

    // authentication / metrics
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("genuine and impostor means coincide (mu_g={mu_g}, mu_i={mu_i})")]
    DegenerateSeparation { mu_g: f64, mu_i: f64 },
    #[error("genuine score spread is zero")]
    DegenerateSpread,
    #[error("need at least 4 scores for quantiles, got {0}")]
    TooFewScores(usize),
    #[error("mean embedding of user {0} has zero norm")]
    ZeroMean(String),
    #[error("gallery holds no templates")]
    NoTemplates,
    #[error("score list is empty")]
    EmptyScores,

    // configuration
    #[error("config error: {}", .0.join("; "))]
    ConfigError(Vec<String>),
    #[error("refusing to overwrite run directory {dir}: config digest {existing} differs from {new}")]
    DigestMismatch { dir: PathBuf, existing: String, new: String },
}

impl Error {
    /// Stable machine-readable code for the CLI's structured error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::MissingFile(_) => "MissingFile",
            Error::MalformedHeader { .. } => "MalformedHeader",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::IoFailure { .. } => "IoFailure",
            Error::InvalidRecord(_) => "InvalidRecord",
            Error::InvalidParams(_) => "InvalidParams",
            Error::MissingState { .. } => "MissingState",
            Error::EmptyClass(_) => "EmptyClass",
            Error::InvalidCutoff(_) => "InvalidCutoff",
            Error::UnstableResult(_) => "UnstableResult",
            Error::DegenerateSignal(_) => "DegenerateSignal",
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::NonFiniteGradient(_) => "NonFiniteGradient",
            Error::TooFewClasses { .. } => "TooFewClasses",
            Error::InsufficientData(_) => "InsufficientData",
            Error::DegenerateSeparation { .. } => "DegenerateSeparation",
            Error::DegenerateSpread => "DegenerateSpread",
            Error::TooFewScores(_) => "TooFewScores",
            Error::ZeroMean(_) => "ZeroMean",
            Error::NoTemplates => "NoTemplates",
            Error::EmptyScores => "EmptyScores",
            Error::ConfigError(_) => "ConfigError",
            Error::DigestMismatch { .. } => "DigestMismatch",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::IoFailure { path, source }
        }
    }
}
