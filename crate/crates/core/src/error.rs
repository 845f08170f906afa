use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numerical failure: {matrix} not positive definite (jitter reached {jitter:e})")]
    NumericalFailure { matrix: String, jitter: f64 },

    #[error("fitting failed on every restart: {}", RestartDiagnostics(.0))]
    FittingFailure(Vec<String>),

    #[error("phase violation: {0}")]
    Phase(String),

    #[error(
        "{kind} format version {found} is not supported (expected {supported}); migration required"
    )]
    MigrationRequired {
        kind: String,
        found: u32,
        supported: u32,
    },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

struct RestartDiagnostics<'a>(&'a [String]);

impl fmt::Display for RestartDiagnostics<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, msg) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "restart {i}: {msg}")?;
        }
        Ok(())
    }
}

impl Error {
    /// Short machine-parsable category, stable across releases.
    pub fn category(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::NumericalFailure { .. } => "numerical-failure",
            Error::FittingFailure(_) => "fitting-failure",
            Error::Phase(_) => "phase-violation",
            Error::MigrationRequired { .. } => "migration-required",
            Error::NotFound(_) => "not-found",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
