use thiserror::Error;

pub type Result<T, E = AuditError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("schema error: missing column `{0}`")]
    MissingColumn(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(String),
}

impl AuditError {
    /// True for errors caused by malformed inputs (column layout, parsing,
    /// invariant violations) as opposed to runtime or data-volume failures.
    pub fn is_schema(&self) -> bool {
        matches!(
            self,
            AuditError::MissingColumn(_)
                | AuditError::Schema(_)
                | AuditError::Parse { .. }
                | AuditError::Validation(_)
                | AuditError::Json(_)
                | AuditError::Csv(_)
        )
    }
}
