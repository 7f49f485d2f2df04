use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a documented invariant (bad file contents, out of
    /// range values, inconsistent shapes).
    #[error("{0}")]
    Invalid(String),

    #[error("{path}: line {line}: {msg}")]
    Row {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("unknown embedding provider `{name}` (registered: {registered})")]
    UnknownProvider { name: String, registered: String },

    #[error("missing embedding archive entries: {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("unknown listener `{0}`")]
    UnknownListener(String),

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("wav {path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("{context}: {source}")]
    Csv {
        context: String,
        #[source]
        source: csv::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Whether the error stems from bad input rather than a failure while
    /// running. The CLI maps these to distinct exit codes.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Divergence { .. } => false,
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}
