//! Process exit codes and error classification.

use std::fmt;
use std::process::ExitCode;

use c2f_core::Error;

pub const CONFIG: u8 = 2;
pub const DATA: u8 = 3;
pub const NUMERIC: u8 = 4;
pub const CHECKPOINT: u8 = 5;
const INTERNAL: u8 = 1;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    /// Any failure while reading or validating a checkpoint.
    pub fn checkpoint(e: Error) -> Self {
        Failure::new(CHECKPOINT, e.to_string())
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.code)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config { .. } | Error::InvalidArgument(_) => CONFIG,
            Error::Dataset(_) | Error::Decode(_) | Error::Io { .. } => DATA,
            Error::NonFinite(_) | Error::Diverged { .. } | Error::TsneDiverged(_) => NUMERIC,
            Error::Checkpoint(_) | Error::KeyMismatch(_) => CHECKPOINT,
            Error::Shape(_) | Error::MissingCache(_) => INTERNAL,
        };
        Failure::new(code, e.to_string())
    }
}

pub type CmdResult = Result<(), Failure>;
