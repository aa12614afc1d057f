use std::path::PathBuf;

use thiserror::Error;

use crate::graph::{ParseError, Violation};

#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("config error: {message}")]
pub struct ConfigError {
    pub message: String,
}

impl ConfigError {
    pub fn new(message: impl Into<String>) -> Self {
        ConfigError {
            message: message.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum GraphError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("validation error: {0}")]
    Validation(#[from] Violation),
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum EvalError {
    #[error("dimension mismatch: u has {user}, v has {item}")]
    DimensionMismatch { user: usize, item: usize },
    #[error("non-finite value at node {node}")]
    NonFinite { node: usize },
    #[error("graph cannot be evaluated: {0}")]
    Malformed(#[from] Violation),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("format error in {path}, line {line}: {message}")]
    Format {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("dataset has no interactions")]
    EmptyDataset,
    #[error("dataset invariant violated: {0}")]
    Invariant(String),
    #[error("negative sampling stalled for user {user}: no unobserved item found")]
    SamplerStall { user: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("degenerate candidate: {non_finite} of {batches} batches non-finite in epoch {epoch}")]
    DegenerateCandidate {
        epoch: usize,
        non_finite: usize,
        batches: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("unknown token {0}")]
    UnknownToken(String),
    #[error("surrogate training needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("malformed token sequence")]
    MalformedSequence,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// Top-level error for orchestration code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("incomplete run directory {0}: no completion marker")]
    IncompleteRun(PathBuf),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
