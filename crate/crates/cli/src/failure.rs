//! Exit-code classification: 1 for failed properties and runtime faults,
//! 2 for usage and configuration errors.

use std::fmt;

use cqk_core::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_USAGE: u8 = 2;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn failed(message: impl Into<String>) -> Self {
        Failure { code: EXIT_FAILURE, message: message.into() }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::InvalidArgument(_) | Error::TokenOutOfRange { .. } | Error::SequenceTooLong { .. } => {
                Failure::usage(e.to_string())
            }
            other => Failure::failed(other.to_string()),
        }
    }
}

pub fn io(path: &std::path::Path, e: std::io::Error) -> Failure {
    Failure::failed(format!("{}: {e}", path.display()))
}
