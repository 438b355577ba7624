use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Shapes or settings that cannot describe a valid model.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data that violates an operation's precondition.
    #[error("input error: {0}")]
    Input(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at epoch {epoch}: {msg}")]
    Training { epoch: usize, msg: String },

    /// A gradient or invariant check failed; names the offending tensor.
    #[error("verification failed at {tensor}[{index}]: {msg}")]
    Verification {
        tensor: String,
        index: usize,
        msg: String,
    },

    /// Broken internal contract (mismatched cache, out-of-range phase, ...).
    #[error("internal error: {0}")]
    Internal(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
