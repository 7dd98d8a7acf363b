//! Error taxonomy shared by every stage of the pipeline.

use std::path::PathBuf;

/// Everything that can go wrong, grouped by how a caller should react.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    /// The caller handed us something malformed (bad sizes, empty lists, ...).
    #[error("rejected input: {0}")]
    RejectedInput(String),

    /// A generated or supplied field breaks one of the standing structural assumptions.
    #[error("assumption `{assumption}` violated: {detail}")]
    Consistency { assumption: String, detail: String },

    #[error("unsupported size: {0}")]
    UnsupportedSize(String),

    /// An operation was called on an object that does not satisfy its preconditions.
    #[error("precondition failed: {0}")]
    Precondition(String),

    #[error("linear solver breakdown (condition estimate {condition:.3e}): {detail}")]
    SolverBreakdown { condition: f64, detail: String },

    #[error("no convergence after {iterations} iterations (residual {residual:.3e}): {detail}")]
    Convergence {
        iterations: usize,
        residual: f64,
        detail: String,
    },

    #[error("divergence: {0}")]
    Divergence(String),

    #[error("out of range: {0}")]
    Range(String),

    #[error("configuration error: {0}")]
    Config(String),

    /// A checked mathematical property did not hold at the stated tolerance.
    #[error("property failure: {0}")]
    Property(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    pub(crate) fn consistency(assumption: &str, detail: impl Into<String>) -> Self {
        LabError::Consistency {
            assumption: assumption.to_string(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures of numerical machinery rather than of the inputs.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            LabError::SolverBreakdown { .. }
                | LabError::Convergence { .. }
                | LabError::Divergence(_)
        )
    }

    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Property(_) => 2,
            e if e.is_solver_failure() => 4,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
