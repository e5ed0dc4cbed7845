use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type. `exit_code` maps variants onto the CLI's
/// categorized exit codes (0 ok, 2 usage, 3 I/O, 4 numeric).
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("zero variance: kurtosis undefined")]
    ZeroVariance,

    #[error("invalid config key `{key}`: {detail}")]
    Config { key: String, detail: String },

    #[error("{path}: {source}", path = .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {detail}", path = .path.display())]
    Format { path: PathBuf, detail: String },

    #[error("divergence in stage `{stage}` at epoch {epoch} step {step}: {detail}")]
    Divergence {
        stage: String,
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("teacher/student topology mismatch: {0}")]
    Topology(String),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("value at index {index} is not in {{-1,+1}}: {value}")]
    NotBinary { index: usize, value: f64 },

    #[error("{0}")]
    Invalid(String),
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Unknown { .. } => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::ZeroVariance => 4,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}
