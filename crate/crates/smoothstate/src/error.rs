//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Bad configuration or CLI usage. Maps to exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure at run time (IO, non-finite values). Maps to exit code 1.
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Runtime(format!("io: {e}"))
    }
}

impl Error {
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Runtime(_) => 1,
        }
    }
}
