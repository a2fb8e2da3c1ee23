use std::fmt;
use std::path::Path;

use interlace::Error;

pub const IO: i32 = 1;
pub const CONFIG: i32 = 2;
pub const NUMERIC: i32 = 3;
pub const RESUME: i32 = 4;
pub const CHECKPOINT: i32 = 5;
pub const VERIFICATION: i32 = 6;
pub const INTERRUPTED: i32 = 130;

/// An error carrying the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl Failure {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Failure::new(IO, format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Failure {}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => CONFIG,
            Error::Numeric(_) => NUMERIC,
            Error::ResumeMismatch(_) => RESUME,
            Error::Checkpoint(_) => CHECKPOINT,
            _ => IO,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::new(IO, e.to_string())
    }
}
