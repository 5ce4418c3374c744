use std::fmt;

use lpgflow_core::Error;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const DIMENSION: u8 = 4;
    pub const NO_DATA: u8 = 5;
    pub const CORRUPT: u8 = 6;
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: exit::USAGE,
            message: message.into(),
        }
    }

    pub fn no_data(message: impl Into<String>) -> Self {
        Self {
            code: exit::NO_DATA,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Contract(_) => exit::USAGE,
            Error::Numeric { .. } => exit::NUMERIC,
            Error::Dimension(_) => exit::DIMENSION,
            Error::Corrupt { .. } | Error::Png { .. } => exit::CORRUPT,
            Error::Io { .. } => exit::FAILURE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}
