use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad input data or a violated invariant.
    Data,
    /// Environment or execution failure (I/O, network, divergence).
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    MissingFile(PathBuf),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("schema version mismatch: expected {expected}, found {found}")]
    SchemaVersion { expected: u32, found: u32 },
    #[error("referential integrity: annotation {annotation} references missing {what} {id}")]
    Dangling {
        annotation: u64,
        what: &'static str,
        id: u64,
    },
    #[error("duplicate {what} id {id}")]
    DuplicateId { what: &'static str, id: u64 },
    #[error("invalid record {id}: {message}")]
    InvalidRecord { id: u64, message: String },
    #[error("category {id} clash: {left:?} vs {right:?}")]
    CategoryClash { id: u64, left: String, right: String },
    #[error("conflicting {what} records for id {id}")]
    Conflict { what: &'static str, id: u64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector")]
    ZeroVector,
    #[error("vector for {id} is not unit norm (norm {norm})")]
    NotUnitNorm { id: u64, norm: f64 },
    #[error("missing embedding for sample {0}")]
    MissingEmbedding(u64),
    #[error("requested {requested} items from a population of {population}")]
    TooMany { requested: usize, population: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("set of {size} members cannot give every nonzero-ratio split a member")]
    SetTooSmall { size: usize },
    #[error("assignment does not cover sample {0}")]
    Uncovered(u64),
    #[error("operation {op} is not geometric")]
    NotGeometric { op: String },
    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error("image dimensions {got:?} do not match manifest {expected:?} for sample {id}")]
    ImageDimensions {
        id: u64,
        expected: (u32, u32),
        got: (u32, u32),
    },
    #[error("id space overflow while allocating ids")]
    IdOverflow,
    #[error("augmentation dropped {dropped} of {total} boxes (limit {limit})")]
    TooManyDropped {
        dropped: usize,
        total: usize,
        limit: f64,
    },
    #[error("predictor failed on sample {id}: {message}")]
    Predictor { id: u64, message: String },
    #[error("non-finite loss at epoch {epoch} (last finite loss {last_finite:?})")]
    NonFiniteLoss { epoch: usize, last_finite: Option<f64> },
    #[error("unknown category id {0}")]
    UnknownCategory(u64),
    #[error("remote scorer: {0}")]
    Remote(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("run directory {0} is locked by another process")]
    Locked(PathBuf),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Io { .. }
            | Error::Remote(_)
            | Error::NonFiniteLoss { .. }
            | Error::Predictor { .. }
            | Error::Locked(_) => ErrorKind::Runtime,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
