//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A public contract was violated (non-scalar loss, bad mixing ratio, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch in {op}: left {left:?}, right {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("unknown tensor name `{0}`")]
    UnknownTensor(String),

    #[error("checkpoint version mismatch: expected {expected}, found {found}")]
    CheckpointVersion { expected: String, found: String },

    #[error("corrupt file: {0}")]
    Corrupt(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("integrator unstable at step {step}: |coordinate| reached {magnitude:.3e}")]
    IntegratorUnstable { step: u64, magnitude: f64 },

    #[error("loss became non-finite at epoch {epoch}, step {step} ({detail})")]
    NanLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("too few frames: have {have}, need at least {need}")]
    TooFewFrames { have: usize, need: usize },

    #[error("too few samples at temperature {temperature}: have {have}, need {need}")]
    TooFewSamples {
        temperature: f64,
        have: usize,
        need: usize,
    },

    #[error("temperature {0} not present in pool")]
    UnknownTemperature(f64),

    #[error("mixed pair must come from two distinct temperatures (got {0})")]
    SameTemperaturePair(f64),

    #[error("mixing requires at least two training temperatures")]
    SingleTemperature,

    #[error("checkpoint is missing required partition {0}")]
    MissingPartition(&'static str),

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code the CLI maps this error to: 1 for configuration and
    /// validation problems, 2 for runtime or numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. }
            | Error::Contract(_)
            | Error::MissingCheckpoint(_)
            | Error::MissingPartition(_)
            | Error::EmptyDataset
            | Error::SingleTemperature
            | Error::TooFewFrames { .. }
            | Error::TooFewSamples { .. } => 1,
            _ => 2,
        }
    }
}
