use std::path::PathBuf;

use thiserror::Error;

use crate::encoder::ModelSnapshot;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    MalformedLine {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0} contains no examples")]
    EmptyFile(PathBuf),

    #[error("unknown label {0:?}")]
    UnknownLabel(String),

    #[error("class {0:?} would be empty after sub-sampling")]
    EmptyClass(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in {location}")]
    NonFinite { location: String },

    #[error("training diverged at step {step}")]
    Diverged {
        step: usize,
        last_finite: Box<ModelSnapshot>,
    },

    #[error("missing initialization context: {0}")]
    MissingContext(&'static str),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("weight overflow after round {round}; use fewer rounds or review the error clamp")]
    WeightOverflow { round: usize },

    #[error("no base learner beat chance")]
    NoUsefulLearner,

    #[error("weight update invariant violated in round {round}: {detail}")]
    WeightLaw { round: usize, detail: String },

    #[error("bad artifact format: {0}")]
    Format(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
