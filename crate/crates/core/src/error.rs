use thiserror::Error;

/// Errors produced anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("composition error: {0}")]
    Composition(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("reference solver did not converge; last residual {residual:e}")]
    NonConvergence { residual: f64 },

    #[error("privacy audit failed: composed eps {reported:.6} exceeds budget {budget:.6}")]
    AuditRefused { reported: f64, budget: f64 },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors a caller caused by bad inputs or unmet preconditions,
    /// as opposed to failures at run time.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Dimension { .. }
                | Error::Calibration(_)
                | Error::Composition(_)
                | Error::Parse { .. }
                | Error::AuditRefused { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
