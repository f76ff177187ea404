use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {field}: {message}")]
    Config { field: String, message: String },

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("singular design ({context}): condition number {condition_number:.3e}")]
    Singular {
        context: String,
        condition_number: f64,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("symmetric treatment condition not satisfied: {0}")]
    StcViolated(String),

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn parse(row: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            row,
            message: message.into(),
        }
    }

    pub(crate) fn singular(context: impl Into<String>, condition_number: f64) -> Self {
        Error::Singular {
            context: context.into(),
            condition_number,
        }
    }

    /// True for failures of the numerics (rank deficiency), as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Singular { .. })
    }
}

pub type Result<T> = std::result::Result<T, Error>;
