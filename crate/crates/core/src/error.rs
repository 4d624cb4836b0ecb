use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid box {0}")]
    InvalidBox(String),
    #[error("class id {0} is reserved for background")]
    InvalidClass(usize),
    #[error("invalid scene config: {0}")]
    SceneConfig(String),
    #[error("invalid sampling policy: {0}")]
    Policy(String),
    #[error("sampling needs {needed} proposals, only {available} available")]
    NotEnoughProposals { needed: usize, available: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("magnification factor {0} is below 1")]
    FactorBelowOne(f64),
    #[error("step {step} is beyond the schedule length {total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed {what} at line {line}: {msg}")]
    Format {
        what: &'static str,
        line: usize,
        msg: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user configuration rather than runtime state.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::SceneConfig(_)
                | Error::Policy(_)
                | Error::FactorBelowOne(_)
                | Error::Format { what: "config", .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
