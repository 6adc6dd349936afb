use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not conform.
    #[error("dimension error: {0}")]
    Shape(String),

    /// Argument outside the domain of an operation (log of a non-positive
    /// number, ratio outside [0, 1], iteration past the schedule end, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Tape misuse, e.g. a second backward pass over a consumed tape.
    #[error("state error: {0}")]
    State(String),

    /// Bad input data, e.g. a token id outside the vocabulary.
    #[error("data error: {0}")]
    Data(String),

    #[error("config error: {0}")]
    Config(String),

    /// Keys present in a config file that no section accepts.
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),

    /// Resuming with a config that differs from the one stored in the checkpoint.
    #[error("config mismatch with checkpoint:\n{}", .0.join("\n"))]
    ConfigMismatch(Vec<String>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite gradient in parameter `{param}` at step {step}")]
    NonFiniteGrad { param: String, step: u64 },

    #[error("non-finite loss at step {step}; last good checkpoint: {}",
        .last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        step: u64,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("io error at {}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command line front end:
    /// 2 config, 3 numeric abort, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::UnknownKeys(_) | Error::ConfigMismatch(_) => 2,
            Error::NonFiniteGrad { .. } | Error::NonFiniteLoss { .. } => 3,
            Error::Io { .. } | Error::Checkpoint(_) => 4,
            _ => 1,
        }
    }
}
