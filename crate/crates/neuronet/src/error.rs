use thiserror::Error;

/// Error categories for the whole pipeline.
///
/// The variants map onto the CLI exit-code taxonomy: configuration and
/// data-validation problems are usage errors (exit 2), filesystem and
/// file-format problems are I/O errors (exit 3), and non-finite numerics
/// abort the run (exit 4).
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration: bad shapes, bad strides, duplicate protocols.
    #[error("config error: {0}")]
    Config(String),

    /// API misuse: mismatched argument lengths, non-scalar loss, wrong tape.
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid data content: out-of-range labels, inconsistent geometry.
    #[error("data error: {0}")]
    Data(String),

    /// Malformed file content: bad magic, truncated payload, unsupported field.
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Non-finite value produced where the pipeline requires finite numbers.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Producer/consumer pipeline failure (starvation, worker panic).
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// Broken internal invariant; indicates a bug, not bad input.
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;
