use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition was not met by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A non-finite value appeared where a finite one is required.
    #[error("numeric fault{}: {context}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Numeric {
        context: String,
        step: Option<usize>,
    },

    /// Two components disagree on tensor dimensions.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A serialized artifact could not be decoded.
    #[error("corrupt file {}: {reason}", path.display())]
    Corrupt { path: PathBuf, reason: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {}: {reason}", path.display())]
    Png { path: PathBuf, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn dimension(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            step: None,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a step index to a numeric fault; other variants pass through.
    pub fn at_step(self, index: usize) -> Self {
        match self {
            Error::Numeric { context, .. } => Error::Numeric {
                context,
                step: Some(index),
            },
            other => other,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::contract(format!($($msg)+)));
        }
    };
}
pub(crate) use ensure;
