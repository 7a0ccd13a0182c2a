use thiserror::Error;

/// Errors raised across the model, data and experiment layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite even after jitter {max_jitter:e}{}", ctx(.context))]
    NotPositiveDefinite { max_jitter: f64, context: String },

    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NonSymmetric { asymmetry: f64 },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("unknown parameter: {0}")]
    UnknownParameter(String),

    #[error("unknown task {0}")]
    UnknownTask(usize),

    #[error("task is empty")]
    EmptyTask,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("size guard exceeded: N = {n} > {limit} (set the override to proceed)")]
    SizeGuard { n: usize, limit: usize },

    #[error("insufficient points: requested {requested}, only {available} distinct inputs")]
    InsufficientPoints { requested: usize, available: usize },

    #[error("degenerate targets: {0}")]
    DegenerateTargets(String),

    #[error("non-positive predictive variance at index {0}")]
    NonPositiveVariance(usize),

    #[error("ODE integration failed for subject {subject} at t = {t}: {reason}")]
    IntegrationFailure {
        subject: usize,
        t: f64,
        reason: String,
    },

    #[error("unsupported schema version {found:?} (expected {expected})")]
    SchemaVersion { found: String, expected: String },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("all {attempts} restarts failed; first error: {first}")]
    AllRestartsFailed { attempts: usize, first: String },

    #[error("all {attempts} runs failed; first error: {first}")]
    AllRunsFailed { attempts: usize, first: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn ctx(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl Error {
    /// Attach context (task id, center id, ...) to a factorization failure.
    pub fn with_context(self, what: impl Into<String>) -> Self {
        match self {
            Error::NotPositiveDefinite {
                max_jitter,
                context,
            } => {
                let what = what.into();
                let context = if context.is_empty() {
                    what
                } else {
                    format!("{what}: {context}")
                };
                Error::NotPositiveDefinite {
                    max_jitter,
                    context,
                }
            }
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
