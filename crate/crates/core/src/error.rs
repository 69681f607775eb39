use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pruning pipeline.
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

    #[error("non-finite value produced by layer `{layer}`")]
    NonFinite { layer: String },

    #[error("backward called without a preceding forward pass")]
    NoForward,

    #[error("graph structure error: {0}")]
    Graph(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("unit sets differ: {0}")]
    UnitMismatch(String),

    #[error("combinatorial budget exceeded: C({n},{k}) = {count} > {budget}")]
    Budget {
        n: usize,
        k: usize,
        count: u128,
        budget: u128,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 IO.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Csv(_) => 4,
            Error::NonFinite { .. } | Error::Undefined(_) => 3,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
