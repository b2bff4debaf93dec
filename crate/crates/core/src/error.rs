use thiserror::Error;

use setinfer_numerics::NumericsError;

use crate::text::EncoderError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error("invalid feature `{feature}`: {msg}")]
    InvalidFeature { feature: String, msg: String },
    #[error("row {row}, feature `{feature}`: {msg}")]
    Row {
        row: usize,
        feature: String,
        msg: String,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("sampling: {0}")]
    Sampling(String),
    #[error("unknown feature `{0}`")]
    UnknownFeature(String),
    #[error("unknown generator family `{0}`")]
    UnknownFamily(String),
    #[error("model: {0}")]
    Model(String),
    #[error("target `{0}` is observed")]
    TargetObserved(String),
    #[error("value for `{feature}` is invalid: {msg}")]
    InvalidValue { feature: String, msg: String },
    #[error(
        "non-finite loss in bundle `{bundle}` (observed {observed:?}, shots {shots:?})"
    )]
    NonFiniteLoss {
        bundle: String,
        observed: Vec<String>,
        shots: Vec<usize>,
    },
    #[error("config digest mismatch: checkpoint {found}, expected {expected}")]
    DigestMismatch { expected: String, found: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("acquisition: {0}")]
    Acquisition(#[from] crate::afa::AfaError),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}
