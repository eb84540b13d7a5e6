//! CLI error taxonomy mapped onto the exit-code contract: 0 success,
//! 1 validation error, 2 runtime failure.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn validation(msg: impl Into<String>) -> Self {
        CliError::Validation(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) | CliError::Io { .. } => 2,
        }
    }
}

// Domain errors surfacing through the pipeline are user-visible validation
// problems when they concern inputs, runtime failures otherwise; the coarse
// mapping below treats corpus/config shape problems as validation.
impl From<mmfinger_core::corpus::CorpusError> for CliError {
    fn from(e: mmfinger_core::corpus::CorpusError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<mmfinger_core::encoders::EncoderError> for CliError {
    fn from(e: mmfinger_core::encoders::EncoderError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<mmfinger_core::gop::GopError> for CliError {
    fn from(e: mmfinger_core::gop::GopError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<mmfinger_core::prompt::PromptError> for CliError {
    fn from(e: mmfinger_core::prompt::PromptError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<mmfinger_core::verify::VerifyError> for CliError {
    fn from(e: mmfinger_core::verify::VerifyError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
