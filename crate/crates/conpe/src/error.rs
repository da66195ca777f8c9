//! Crate-wide error type and exit-code mapping.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConpeError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric degeneracy: {0}")]
    Numeric(String),

    #[error("planner error: {0}")]
    Planner(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid json at {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

impl ConpeError {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        ConpeError::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<String>, reason: impl Into<String>) -> Self {
        ConpeError::Format { path: path.into(), reason: reason.into() }
    }

    /// Process exit code contract: 2 = missing/unreadable input, 3 = validation
    /// failure, 1 = any runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            ConpeError::Io { .. } => 2,
            ConpeError::Validation(_) | ConpeError::Config(_) | ConpeError::Json { .. } => 3,
            _ => 1,
        }
    }

    /// One-line machine-parsable code for stderr reporting.
    pub fn code(&self) -> &'static str {
        match self {
            ConpeError::Config(_) => "E_CONFIG",
            ConpeError::Shape(_) => "E_SHAPE",
            ConpeError::Usage(_) => "E_USAGE",
            ConpeError::InsufficientData(_) => "E_DATA",
            ConpeError::Numeric(_) => "E_NUMERIC",
            ConpeError::Planner(_) => "E_PLANNER",
            ConpeError::Validation(_) => "E_VALIDATION",
            ConpeError::Io { .. } => "E_IO",
            ConpeError::Json { .. } => "E_JSON",
            ConpeError::Format { .. } => "E_FORMAT",
        }
    }
}

pub type Result<T> = std::result::Result<T, ConpeError>;
