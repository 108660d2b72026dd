use std::path::PathBuf;

use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("blob length mismatch: manifest covers {expected} bytes, blob has {actual}")]
    BlobLengthMismatch { expected: u64, actual: u64 },
    #[error("key file: {0}")]
    KeyFile(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("quantization gap: float accuracy {float:.2}% vs fixed-point {fixed:.2}%")]
    QuantizationGap { float: f64, fixed: f64 },
    #[error("usage: {0}")]
    Usage(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Core(#[from] lockdnn_core::Error),
}

/// Machine-readable form printed on stderr by the CLI.
#[derive(Debug, Serialize)]
pub struct ErrorReport {
    pub error: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn code(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::Malformed(_) => "malformed_manifest",
            Error::DimMismatch(_) => "dim_mismatch",
            Error::BlobLengthMismatch { .. } => "blob_length_mismatch",
            Error::KeyFile(_) => "key_file",
            Error::Dataset(_) => "dataset",
            Error::Divergence { .. } => "divergence",
            Error::QuantizationGap { .. } => "quantization_gap",
            Error::Usage(_) => "usage",
            Error::Invariant(_) => "invariant",
            Error::Core(_) => "model",
        }
    }

    /// 2 for usage errors, 4 for violated invariants, 3 for bad data.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 2,
            Error::Invariant(_) | Error::Divergence { .. } | Error::QuantizationGap { .. } => 4,
            _ => 3,
        }
    }

    pub fn report(&self) -> ErrorReport {
        ErrorReport { error: self.code(), message: self.to_string(), exit_code: self.exit_code() }
    }
}
