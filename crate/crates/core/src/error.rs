//! Error type shared by every stage of the pipeline.

use thiserror::Error;

/// Errors produced by the front end, the inference engine, the transfer
/// harness and the metric suite.
#[derive(Debug, Error)]
pub enum Error {
    /// The byte stream is not a well-formed RIFF/WAVE container.
    #[error("malformed WAV data: {0}")]
    Decode(String),

    /// A well-formed WAV file with an encoding we do not read.
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    /// Argument outside the mathematical domain of a function.
    #[error("domain error: {0}")]
    Domain(String),

    /// Invalid configuration or an input set that cannot be processed.
    #[error("configuration error: {0}")]
    Config(String),

    /// Input shorter than the minimum the operation needs.
    #[error("input too short: {0}")]
    TooShort(String),

    /// Tensor shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    /// A weight bundle or container whose contents disagree with its manifest.
    #[error("validation error: {0}")]
    Validation(String),

    /// Bad magic, unknown version or truncated container.
    #[error("format error: {0}")]
    Format(String),

    /// A layer list that cannot be transformed as requested.
    #[error("structure error: {0}")]
    Structure(String),

    #[error("parse error: {0}")]
    Parse(String),

    /// A metric whose value is undefined for the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
