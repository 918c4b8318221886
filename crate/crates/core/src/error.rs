use thiserror::Error;

use crate::market::ValidationReport;

/// Errors raised by the market engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at {path}: {reason}")]
    Parse { path: String, reason: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("invalid market instance: {0}")]
    Invalid(ValidationReport),

    #[error("price vector does not match the market: expected {expected_buyer} buyer and {expected_data} data edges, found {found_buyer} and {found_data}")]
    Shape {
        expected_buyer: usize,
        expected_data: usize,
        found_buyer: usize,
        found_data: usize,
    },

    #[error("ground set of {size} players exceeds the exact enumeration limit of {limit}")]
    Capacity { size: usize, limit: usize },

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error("cannot normalize Shapley column for model `{model}`: raw sum {sum} is not positive")]
    Normalization { model: String, sum: f64 },

    #[error("missing list cap for dataset `{dataset}` on model `{model}`")]
    MissingCap { dataset: String, model: String },

    #[error("incomplete utility table for model `{model}`: {reason}")]
    IncompleteUtility { model: String, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
