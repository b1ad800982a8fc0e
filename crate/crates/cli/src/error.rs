use std::io;

use thiserror::Error;

/// Failures surfaced by the command line, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) | CliError::Io { .. } => 3,
            CliError::Numeric(_) => 4,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<&sidetune::Error> for CliError {
    fn from(e: &sidetune::Error) -> Self {
        use sidetune::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Spec(_) | E::Scheme(_) | E::Key(_) => CliError::Config(msg),
            E::Task(_) | E::Format { .. } | E::Io(_) => CliError::Data(msg),
            E::NonFinite { .. } | E::Dimension { .. } | E::Contract(_) => CliError::Numeric(msg),
        }
    }
}

impl From<sidetune::Error> for CliError {
    fn from(e: sidetune::Error) -> Self {
        CliError::from(&e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
