use std::fmt;
use std::process::ExitCode;

use polyp_ses::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Internal = 1,
    Input = 2,
    Checkpoint = 3,
}

/// A one-line diagnostic plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Input,
            message: message.into(),
        }
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Internal,
            message: message.into(),
        }
    }

    pub fn checkpoint(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Checkpoint,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(self.kind as u8)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // Keep diagnostics on one line even when a source error spans several.
        let flat: Vec<&str> = self
            .message
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .collect();
        write!(f, "error: {}", flat.join(" "))
    }
}

/// Library errors raised while reading user inputs.
impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match e {
            Error::Checkpoint(_) => Kind::Checkpoint,
            Error::Config(_) | Error::Ingestion(_) | Error::Image { .. } | Error::Io(_) => {
                Kind::Input
            }
            _ => Kind::Internal,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

pub trait Context<T> {
    /// Reclassifies any error as a checkpoint failure.
    fn checkpoint(self, what: &str) -> Result<T, Failure>;
    /// Reclassifies any error as an internal failure (writing outputs).
    fn internal(self, what: &str) -> Result<T, Failure>;
}

impl<T, E: fmt::Display> Context<T> for Result<T, E> {
    fn checkpoint(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::checkpoint(format!("{what}: {e}")))
    }

    fn internal(self, what: &str) -> Result<T, Failure> {
        self.map_err(|e| Failure::internal(format!("{what}: {e}")))
    }
}
