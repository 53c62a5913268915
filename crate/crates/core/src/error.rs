//! Error taxonomy shared by every module.
//!
//! Each variant maps to one process exit code so the CLI can translate
//! failures mechanically: contract violations (bad arguments, broken
//! preconditions) exit 2, malformed files exit 3, numeric failures (NaN/Inf
//! where finite values are required) exit 4, and missing data (ids, labels,
//! referenced audio) exit 5.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument or precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A file's bytes do not follow the documented format.
    #[error("format error: {0}")]
    Format(String),

    /// A computation produced or received non-finite values.
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Referenced data (sample id, label, embedding) is absent.
    #[error("data error: {0}")]
    Data(String),

    /// The operating system refused a file operation.
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code the CLI reports for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Contract(_) | Error::Io { .. } => 2,
            Error::Format(_) => 3,
            Error::Numeric(_) => 4,
            Error::Data(_) => 5,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_mapping() {
        assert_eq!(Error::contract("x").exit_code(), 2);
        assert_eq!(Error::format("x").exit_code(), 3);
        assert_eq!(Error::numeric("x").exit_code(), 4);
        assert_eq!(Error::data("x").exit_code(), 5);
        let io = Error::io("/nope", std::io::Error::from(std::io::ErrorKind::NotFound));
        assert_eq!(io.exit_code(), 2);
    }

    #[test]
    fn messages_carry_context() {
        let e = Error::data("missing teacher embedding for id \"clip_7\"");
        assert!(e.to_string().contains("clip_7"));
    }
}
