use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{}:{line}: {msg}", path.display())]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("missing value for `{column}` in row {row}")]
    MissingValue { row: usize, column: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("too few observations: need at least {needed}, found {found}")]
    SampleSize { needed: usize, found: usize },

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("perfect prediction: {0}")]
    PerfectPrediction(String),

    #[error("monotone likelihood: {0}")]
    MonotoneLikelihood(String),

    #[error("no convergence after {iterations} iterations ({what})")]
    NonConvergence { what: String, iterations: usize },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("replicate m={m}: {source}")]
    Replicate {
        m: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    /// True for failures of an estimation or factorization step, as opposed
    /// to malformed input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::SingularDesign(_)
            | Error::PerfectPrediction(_)
            | Error::MonotoneLikelihood(_)
            | Error::NonConvergence { .. }
            | Error::Numerical(_) => true,
            Error::Replicate { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}
