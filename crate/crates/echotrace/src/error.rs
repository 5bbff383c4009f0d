//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A grid operation was handed incompatible shapes or strides.
    #[error("{op}: {msg}")]
    Shape { op: &'static str, msg: String },

    /// Invalid model, training or generator configuration.
    #[error("config: {0}")]
    Config(String),

    /// Malformed file contents; the message locates the problem.
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },

    /// Underlying I/O failure. The cause is embedded in the display text;
    /// naming the field anything but `source` keeps thiserror from also
    /// exposing it through `source()`, which would print it twice.
    #[error("{path}: {cause}")]
    Io { path: String, cause: std::io::Error },

    /// Computation-graph misuse (unknown node, backward before forward, ...).
    #[error("graph: {0}")]
    Graph(String),

    /// A numeric-domain precondition was violated (non-finite values,
    /// out-of-range rows, empty label grids, ...).
    #[error("{0}")]
    Domain(String),
}

impl Error {
    pub fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape {
            op,
            msg: msg.into(),
        }
    }

    pub fn format(path: impl AsRef<std::path::Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            msg: msg.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, cause: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            cause,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
