use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on {axis}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what}: training diverged at step {step}")]
    Diverged { what: &'static str, step: usize },
    #[error("checksum mismatch for {}", .0.display())]
    Checksum(PathBuf),
    #[error("malformed {what}: {msg}")]
    Format { what: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Invalid {
            op,
            msg: msg.into(),
        }
    }

    pub(crate) fn shape(
        op: &'static str,
        axis: impl Into<String>,
        expected: usize,
        found: usize,
    ) -> Self {
        Error::Shape {
            op,
            axis: axis.into(),
            expected,
            found,
        }
    }

    pub(crate) fn format(what: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            what,
            msg: msg.into(),
        }
    }
}
