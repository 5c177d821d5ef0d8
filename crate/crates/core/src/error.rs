use std::path::PathBuf;

/// Errors surfaced by every fallible operation in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("projection undefined: {0}")]
    Projection(String),

    #[error("{path}: parse error at byte {offset}: {msg}")]
    Parse {
        path: PathBuf,
        offset: usize,
        msg: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class: 2 usage/config, 3 I/O, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Parse { .. } => 3,
            Error::NonFinite(_) | Error::Gradcheck(_) => 4,
            _ => 2,
        }
    }
}
