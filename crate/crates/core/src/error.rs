use thiserror::Error;

pub type Result<T> = std::result::Result<T, OsmacError>;

#[derive(Debug, Error)]
pub enum OsmacError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("singular matrix: {context}")]
    Singular { context: String },

    #[error("degenerate sampling distribution: {0}")]
    Degenerate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("pilot estimate failed after {attempts} attempts ({reason}); increase the pilot size r0")]
    PilotFailure { attempts: usize, reason: String },

    #[error("second-stage fit failed: {0}")]
    FitFailure(String),

    #[error("csv parse error at row {row}, column '{column}': {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("response outside family support at rows {rows:?}")]
    Support { rows: Vec<usize> },

    #[error("internal error: {0}")]
    Internal(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
