use thiserror::Error;

/// Errors produced anywhere in the core crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid shape {0:?}: every dimension must be >= 1")]
    InvalidShape(Vec<usize>),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in tensor data")]
    NonFinite,

    #[error("invalid range: max {max} < min {min}")]
    InvalidRange { min: f64, max: f64 },

    #[error("bit-width {0} outside [2, 16]")]
    InvalidBitWidth(u32),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("scheme requires calibration: {0}")]
    Uncalibrated(String),

    #[error("dynamic quantization needs the widened output tensor")]
    MissingWidenedOutput,

    #[error("calibration record model hash {record} does not match model hash {model}")]
    ModelHashMismatch { record: String, model: String },

    #[error("accumulator overflow: {0} does not fit the cast width")]
    AccumulatorOverflow(i128),

    #[error("severity {0} outside [1, 5]")]
    InvalidSeverity(u8),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
