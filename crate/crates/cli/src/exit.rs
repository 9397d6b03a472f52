//! Process exit codes: 0 success, 1 check failed, 2 usage, 3 computation, 4 IO.

use std::fmt;

use idflow::Error;

pub const CHECK_FAILED: u8 = 1;
pub const USAGE: u8 = 2;
pub const COMPUTE: u8 = 3;
pub const IO: u8 = 4;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

pub type Outcome<T> = Result<T, Failure>;

impl Failure {
    pub fn new(code: u8, msg: impl fmt::Display) -> Self {
        Self {
            code,
            error: anyhow::anyhow!("{msg}"),
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Self::new(USAGE, msg)
    }

    pub fn io(msg: impl fmt::Display) -> Self {
        Self::new(IO, msg)
    }
}

pub fn code_for(e: &Error) -> u8 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Domain { .. } | Error::Spec(_) => USAGE,
        Error::Io { .. } | Error::Format { .. } => IO,
        Error::Dimension { .. }
        | Error::Degenerate(_)
        | Error::NonFinite(_)
        | Error::Fusion(_)
        | Error::Mismatch(_)
        | Error::Divergence { .. } => COMPUTE,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: code_for(&e),
            error: e.into(),
        }
    }
}
