use thiserror::Error;

/// Errors raised by estimation, simulation and I/O routines.
#[derive(Debug, Error)]
pub enum EhivError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("covariate column {column} has zero variance")]
    DegenerateCovariate { column: usize },

    #[error("trimming removed every observation")]
    EmptyActiveSet,

    #[error("singular matrix in {context}")]
    Rank { context: &'static str },

    #[error("trimming floor violated: {0}")]
    Trim(String),

    #[error("point is outside the estimable support: {0}")]
    OutOfSupport(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schema error at row {row}, column '{column}': {message}")]
    Schema {
        row: usize,
        column: String,
        message: String,
    },

    #[error("unknown column '{requested}'; available headers: {available}")]
    MissingColumn { requested: String, available: String },

    #[error("{failed} of {total} resamples failed")]
    Instability { failed: usize, total: usize },

    #[error("{failed} of {total} Monte Carlo replications failed")]
    Harness { failed: usize, total: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl EhivError {
    /// Process exit code: 2 configuration, 3 data, 4 numerical failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            EhivError::Config(_) => 2,
            EhivError::Io(_)
            | EhivError::Csv(_)
            | EhivError::Json(_)
            | EhivError::Schema { .. }
            | EhivError::MissingColumn { .. }
            | EhivError::InsufficientData(_)
            | EhivError::DegenerateCovariate { .. }
            | EhivError::Domain(_) => 3,
            EhivError::EmptyActiveSet
            | EhivError::Rank { .. }
            | EhivError::Trim(_)
            | EhivError::OutOfSupport(_)
            | EhivError::Instability { .. }
            | EhivError::Harness { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, EhivError>;
