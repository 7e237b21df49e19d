//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },

    #[error("invalid MLP spec: {0}")]
    BadSpec(String),

    #[error("tape contract violation: {0}")]
    TapeContract(String),

    #[error("integration blew up (non-finite state) at step {step}")]
    Blowup { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(
        "initial-condition sampling region too small: {accepted} of {proposed} proposals accepted"
    )]
    SamplingRegion { accepted: usize, proposed: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("training failed: {0}")]
    TrainingFailure(String),

    #[error("fit extraction failed: {0}")]
    Extraction(String),

    #[error("undefined energy ratio: |H| = {h_abs:.3e} below 1e-12")]
    UndefinedRatio { h_abs: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("malformed file {path}: {detail}")]
    Parse { path: String, detail: String },

    #[error("acceptance check failed: {0}")]
    CheckFailed(String),
}

impl Error {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }

    /// Process exit code for the CLI: config problems are 1, runtime failures 2,
    /// failed `--check` assertions 3.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::BadSpec(_) => 1,
            Error::CheckFailed(_) => 3,
            _ => 2,
        }
    }
}
