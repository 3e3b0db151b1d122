use cmi_core::CmiError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad files, flags or configuration.
    #[error("{0}")]
    Input(String),
    /// The computation itself failed (divergence, non-finite values).
    #[error("{0}")]
    Numerical(String),
    /// A replayed run did not reproduce its records.
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) | CliError::Mismatch(_) => 3,
        }
    }

    /// Wraps a core error, prefixing `context` when it is non-empty.
    pub fn from_core(context: &str, e: CmiError) -> Self {
        let msg = if context.is_empty() {
            e.to_string()
        } else {
            format!("{context}: {e}")
        };
        if e.is_numerical() {
            CliError::Numerical(msg)
        } else {
            CliError::Input(msg)
        }
    }
}

impl From<CmiError> for CliError {
    fn from(e: CmiError) -> Self {
        CliError::from_core("", e)
    }
}

pub type CliResult<T> = Result<T, CliError>;
