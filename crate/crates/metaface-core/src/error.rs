use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("gradient target must be a scalar, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("tensor {0:?} does not belong to this tape")]
    UnknownVar(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sizing violation: {0}")]
    Sizing(String),

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("numeric failure at step {step}: {source}")]
    Numeric {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("manifest parse error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wrap a numeric failure with the training step it occurred at.
    pub fn at_step(self, step: usize) -> Error {
        match self {
            Error::Numeric { .. } => self,
            other => Error::Numeric {
                step,
                source: Box::new(other),
            },
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
