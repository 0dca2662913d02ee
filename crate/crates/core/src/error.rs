//! Error type shared by every module of the laboratory.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, LabError>;

#[derive(Debug, Error)]
pub enum LabError {
    /// A world table or distribution violates its invariants.
    #[error("invalid world: {field} {reason}{}", line_suffix(*.line))]
    InvalidWorld {
        field: String,
        reason: String,
        line: Option<usize>,
    },

    #[error("invalid count: {0}")]
    InvalidCount(String),

    #[error("invalid logits: {0}")]
    InvalidLogits(String),

    #[error("invalid mixture weights: {0}")]
    InvalidMixtureWeights(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("absolute continuity violated at ({x},{y})")]
    AbsoluteContinuity { x: usize, y: usize },

    #[error("coverage violated at ({x},{y})")]
    CoverageViolated { x: usize, y: usize },

    #[error("invalid threshold: {0}")]
    InvalidThreshold(f64),

    #[error("invalid regularisation strength: {0}")]
    InvalidBeta(f64),

    #[error("bound requires finite clipping threshold")]
    UnclippedThreshold,

    #[error("invalid budget: {0}")]
    InvalidBudget(String),

    #[error("invalid cost model: {0}")]
    InvalidCost(String),

    #[error("covariance not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("H and Sigma_g do not commute")]
    NotCommuting,

    #[error("invalid OU specification: {0}")]
    InvalidOuSpec(String),

    #[error("invalid posterior: {0}")]
    InvalidPosterior(String),

    #[error("empty sample")]
    EmptySample,

    #[error("tau grid is not sorted ascending")]
    UnsortedGrid,

    #[error("invalid config{}: {message}", line_suffix(*.line))]
    InvalidConfig {
        message: String,
        line: Option<usize>,
    },

    #[error("campaign aborted at trial {trial} (seed {seed}): {source}")]
    TrialFailed {
        trial: u64,
        seed: u64,
        #[source]
        source: Box<LabError>,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

fn line_suffix(line: Option<usize>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}

impl LabError {
    pub(crate) fn world(field: &str, reason: impl Into<String>) -> Self {
        LabError::InvalidWorld {
            field: field.to_string(),
            reason: reason.into(),
            line: None,
        }
    }

    pub(crate) fn config(message: impl Into<String>, line: Option<usize>) -> Self {
        LabError::InvalidConfig {
            message: message.into(),
            line,
        }
    }

    /// Attach a source line to config-related errors that don't carry one yet.
    pub(crate) fn at_line(self, at: Option<usize>) -> Self {
        match self {
            LabError::InvalidWorld {
                field,
                reason,
                line: None,
            } => LabError::InvalidWorld {
                field,
                reason,
                line: at,
            },
            LabError::InvalidConfig {
                message,
                line: None,
            } => LabError::InvalidConfig { message, line: at },
            other => other,
        }
    }
}
