use std::path::PathBuf;

pub type Result<T, E = SimError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    /// Bad spec file, flag combination or mismatched artifact.
    #[error("configuration error: {0}")]
    Config(String),
    /// Solver or training breakdown.
    #[error("numerical failure: {0}")]
    Numeric(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
}

impl SimError {
    pub fn config(msg: impl Into<String>) -> Self {
        SimError::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SimError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        SimError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status: 2 for configuration problems, 3 for numerical
    /// failures, 1 for anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            SimError::Config(_) | SimError::Format { .. } => 2,
            SimError::Numeric(_) => 3,
            SimError::Io { .. } | SimError::Csv(_) => 1,
        }
    }
}

impl From<irs_core::Error> for SimError {
    fn from(e: irs_core::Error) -> Self {
        use irs_core::Error as E;
        match e {
            E::Domain(_) | E::Config(_) | E::Shape(_) => SimError::Config(e.to_string()),
            E::Numerical(_) | E::Diverged { .. } => SimError::Numeric(e.to_string()),
        }
    }
}
