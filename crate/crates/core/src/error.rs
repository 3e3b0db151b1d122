use thiserror::Error;

pub type Result<T> = std::result::Result<T, CmiError>;

#[derive(Debug, Error)]
pub enum CmiError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{0}")]
    Degenerate(String),

    #[error("training diverged: {0}")]
    Training(String),

    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("malformed model record: {0}")]
    Format(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<CmiError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CmiError {
    pub(crate) fn in_stage(self, stage: &'static str) -> CmiError {
        CmiError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the failure stems from numerics (divergence, NaN) rather
    /// than from malformed input or configuration.
    pub fn is_numerical(&self) -> bool {
        match self {
            CmiError::Training(_) | CmiError::NonFinite(_) => true,
            CmiError::Stage { source, .. } => source.is_numerical(),
            _ => false,
        }
    }
}

pub(crate) fn check_finite(values: impl IntoIterator<Item = f64>, what: &'static str) -> Result<()> {
    if values.into_iter().all(f64::is_finite) {
        Ok(())
    } else {
        Err(CmiError::NonFinite(what))
    }
}
