use std::path::PathBuf;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("input not found: {0}")]
    InputNotFound(PathBuf),
    #[error("unknown scenario {0:?}")]
    UnknownScenario(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("does not fit: {0}")]
    Capacity(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("internal invariant violated: {0}")]
    Internal(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::InputNotFound(_) => "input-not-found",
            CliError::UnknownScenario(_) => "unknown-scenario",
            CliError::Config(_) => "invalid-config",
            CliError::Input(_) => "invalid-input",
            CliError::Capacity(_) => "capacity",
            CliError::Io(_) => "io",
            CliError::Internal(_) => "internal",
        }
    }

    /// 1 for broken internal invariants, 2 for anything the user can fix.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            _ => 2,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Report<'a> {
            kind: &'a str,
            message: String,
        }
        serde_json::to_string(&Report {
            kind: self.kind(),
            message: self.to_string(),
        })
        .expect("plain struct serializes")
    }
}

impl From<aqpim_core::Error> for CliError {
    fn from(e: aqpim_core::Error) -> Self {
        use aqpim_core::Error as E;
        match e {
            E::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => CliError::InputNotFound(path),
            E::Io { .. } => CliError::Io(e.to_string()),
            E::Invalid(_) | E::PageResidency { .. } | E::Json(_) => CliError::Config(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<aqpim_sim::SimError> for CliError {
    fn from(e: aqpim_sim::SimError) -> Self {
        use aqpim_sim::SimError as E;
        match e {
            E::Capacity { .. } | E::BankFull { .. } => CliError::Capacity(e.to_string()),
            E::Protocol { .. } => CliError::Internal(e.to_string()),
            E::Core(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
