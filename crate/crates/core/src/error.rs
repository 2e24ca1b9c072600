use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can surface.
///
/// Variants are grouped by how an operator should react to them; see
/// [`Error::exit_code`] for the mapping used by the command line.
#[derive(Debug, Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),

    #[error("dimension mismatch in {op}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("degenerate input: {what} (row {row}) has L2 norm {norm:e} below floor")]
    Degenerate { what: &'static str, row: usize, norm: f64 },

    #[error("non-finite value in {what} at index {index}")]
    NonFinite { what: String, index: usize },

    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated file while reading {what}")]
    Truncated { what: String },

    #[error("embedding dimension mismatch: expected {expected}, file has {found}")]
    EmbeddingDim { expected: usize, found: usize },

    #[error("row count mismatch: expected {expected} rows, file has {found}")]
    RowCount { expected: usize, found: usize },

    #[error("invalid data: {0}")]
    Data(String),

    #[error("empty {0}")]
    Empty(String),

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        detail: String,
    },

    #[error("privacy violation: {0}")]
    Privacy(String),

    #[error("network error: {0}")]
    Network(String),

    #[error("authentication rejected by endpoint (HTTP {status})")]
    Auth { status: u16 },

    #[error("malformed response: {0}")]
    MalformedResponse(String),

    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, expected: impl ToString, found: impl ToString) -> Self {
        Error::Dimension {
            op,
            expected: expected.to_string(),
            found: found.to_string(),
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 network.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) => 1,
            Error::Network(_)
            | Error::Auth { .. }
            | Error::MalformedResponse(_)
            | Error::MissingCredential(_) => 3,
            _ => 2,
        }
    }
}
