use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by the CLI to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero variance in {0}: correlation is undefined")]
    ZeroVariance(&'static str),

    #[error("matrix is rank deficient: smallest eigenvalue of W·Wᵀ is {smallest:e} (threshold {threshold:e})")]
    RankDeficient { smallest: f64, threshold: f64 },

    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("archive parse error at byte {position}: {message}")]
    Archive { position: u64, message: String },

    #[error("archive is truncated: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("archive entries `{first}` and `{second}` overlap at payload byte {position}")]
    OverlappingEntries {
        first: String,
        second: String,
        position: u64,
    },

    #[error("duplicate tensor name `{0}`")]
    DuplicateName(String),

    #[error("tensor `{0}` not found")]
    MissingTensor(String),

    #[error("invalid model bundle: {0}")]
    Bundle(String),

    #[error("label consistency error in image `{image}`: instance {instance} carries classes {first} and {second}")]
    LabelConsistency {
        image: String,
        instance: i32,
        first: i32,
        second: i32,
    },

    #[error("invalid labels: {0}")]
    Labels(String),

    #[error("non-finite value at layer {layer} ({sublayer})")]
    ForwardNonFinite { layer: usize, sublayer: &'static str },

    #[error("conflicting hooks on layer {0}")]
    ConflictingHooks(usize),

    #[error("layer mismatch: probe was trained on layer {probe}, asked for layer {requested}")]
    LayerMismatch { probe: usize, requested: usize },

    #[error("wrong probe family: expected {expected}, found {found}")]
    WrongFamily { expected: String, found: String },

    #[error("non-finite training loss at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Unsupported(_) => ErrorClass::Config,
            Error::NonFinite(_)
            | Error::ZeroVariance(_)
            | Error::RankDeficient { .. }
            | Error::NotPositiveDefinite { .. }
            | Error::ForwardNonFinite { .. }
            | Error::Diverged { .. } => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
