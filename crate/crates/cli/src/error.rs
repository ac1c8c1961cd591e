use thiserror::Error;

/// Command failures, one variant per exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("check failed: {0}")]
    Acceptance(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Acceptance(_) => 5,
        }
    }
}

impl From<favit_core::Error> for CliError {
    fn from(e: favit_core::Error) -> Self {
        use favit_core::Error as E;
        let msg = e.to_string();
        match e {
            E::Config(_) | E::Geometry { .. } => CliError::Config(msg),
            E::Format(_) | E::Io(_) | E::Index { .. } => CliError::Data(msg),
            E::Dimension { .. } | E::NonFinite { .. } | E::Accounting { .. } => CliError::Numeric(msg),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
