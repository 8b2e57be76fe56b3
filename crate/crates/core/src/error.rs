use thiserror::Error;

/// Errors raised by the design, modelling and search routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("model not identified: dependent columns {columns:?}")]
    Identifiability { columns: Vec<String> },

    #[error("estimand not identified: {0}")]
    EstimandNotIdentified(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("search bound exceeded: {0}")]
    SearchBound(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
