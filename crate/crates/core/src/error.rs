use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),

    #[error("invalid model spec: {0}")]
    InvalidSpec(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("IDX format error at byte {offset}: {message}")]
    IdxFormat { offset: u64, message: String },

    #[error("CSV format error at line {line}: {message}")]
    CsvFormat { line: u64, message: String },

    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A step-size formula would divide by a zero gradient norm.
    #[error("degenerate gradient: {0}")]
    DegenerateGradient(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),

    /// Replay memory is empty; the caller may fall back to a plain
    /// current-task step instead of treating this as fatal.
    #[error("replay memory is empty (no replay available)")]
    EmptyMemory,
}

pub type Result<T> = std::result::Result<T, Error>;
