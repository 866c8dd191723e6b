use thiserror::Error;

use crate::tensor::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid {what}: {reason}")]
    Config { what: &'static str, reason: String },
    #[error("input {height}x{width} is not divisible by the network's downsampling factor {divisor}")]
    Indivisible { height: usize, width: usize, divisor: usize },
    #[error("parameter sets differ: {0}")]
    ParamMismatch(String),
    #[error("dataset: {0}")]
    Data(String),
    #[error("unsupported dataset version {found} (this build reads version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("non-finite loss at step {step} (labelled ids {labelled:?}, unlabelled ids {unlabelled:?})")]
    NonFiniteLoss {
        step: usize,
        labelled: Vec<u32>,
        unlabelled: Vec<u32>,
    },
    #[error("out of range: {0}")]
    Range(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(what: &'static str, reason: impl Into<String>) -> Self {
        Error::Config {
            what,
            reason: reason.into(),
        }
    }
}
