use std::io::ErrorKind;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] cascade_core::Error),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// 1 runtime or backend, 2 input or format, 3 configuration.
    pub fn exit_code(&self) -> i32 {
        use cascade_core::Error as E;
        match self {
            CliError::Config(_) => 3,
            CliError::Input(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) => 3,
                E::InvalidInput(_)
                | E::DimensionMismatch { .. }
                | E::DuplicateId(_)
                | E::UnknownId(_)
                | E::MissingEcr(_)
                | E::Format(_)
                | E::Json(_) => 2,
                E::Io(io) if matches!(io.kind(), ErrorKind::NotFound | ErrorKind::InvalidData) => 2,
                _ => 1,
            },
        }
    }
}
