use std::fmt;

use pafi_core::Error;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Invalid flags, config or mismatched artifacts.
    Usage(String),
    /// An input could not be read or decoded.
    Load(String),
    /// An output could not be written.
    Write(String),
    /// Training touched coordinates outside its mask.
    Frozen(usize),
    Other(String),
}

impl Failure {
    pub fn code(&self) -> i32 {
        match self {
            Failure::Other(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Load(_) => 3,
            Failure::Write(_) => 4,
            Failure::Frozen(_) => 5,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Load(m) | Failure::Write(m) | Failure::Other(m) => f.write_str(m),
            Failure::Frozen(n) => write!(f, "{n} frozen parameters changed during training"),
        }
    }
}

/// Library errors not raised while reading or writing files.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Load(_) => Failure::Load(e.to_string()),
            Error::Config(_) | Error::Contract(_) | Error::Alignment { .. } | Error::Shape { .. } => Failure::Usage(e.to_string()),
            _ => Failure::Other(e.to_string()),
        }
    }
}
