use std::path::PathBuf;

use relext_autograd::EngineError;
use thiserror::Error;

use crate::model::ModelParams;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("instance rejected: {0}")]
    Featurize(String),
    #[error("no attention score for instance {instance} of bag {bag}")]
    MissingScore { bag: usize, instance: usize },
    #[error("empty corpus: {0}")]
    EmptyCorpus(String),
    #[error("evaluation: {0}")]
    Metrics(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize, last_good: Box<ModelParams> },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
