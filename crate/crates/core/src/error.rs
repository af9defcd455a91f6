use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes that cannot be combined by the requested operation.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A configuration that cannot produce a valid model or run.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller-side precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation was invoked in a state that does not support it.
    #[error("state error: {0}")]
    State(String),

    /// A loss, gradient or prediction became NaN or infinite.
    #[error("numerical failure: {0}")]
    NonFinite(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint truncated: {0}")]
    CheckpointTruncated(String),

    #[error("checkpoint shape mismatch for `{name}`: manifest {manifest:?}, model {model:?}")]
    CheckpointShape {
        name: String,
        manifest: Vec<usize>,
        model: Vec<usize>,
    },

    #[error("checkpoint config mismatch: {0}")]
    CheckpointConfig(String),

    #[error("malformed checkpoint: {0}")]
    CheckpointFormat(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}
pub(crate) use dim_err;
