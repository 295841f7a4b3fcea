use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GgmError {
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("data matrix has no rows")]
    EmptyData,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("design submatrix is rank deficient")]
    RankDeficient,
    #[error("column {0} has zero variance")]
    ZeroVarianceColumn(usize),
    #[error("{what} did not converge after {iterations} iterations")]
    NonConverged { what: &'static str, iterations: usize },
    #[error("incoherence check needs p <= {limit}, got {p}")]
    TooLarge { p: usize, limit: usize },
    #[error("every tuning grid point failed")]
    TuningFailed,
    #[error("{stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<GgmError>,
    },
    #[error("{failed} of {total} replications failed")]
    ExperimentFailed { failed: usize, total: usize },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error at {path}: {message}")]
    Csv { path: PathBuf, message: String },
    #[error("parse error: {0}")]
    Parse(String),
}

impl GgmError {
    pub(crate) fn in_stage(self, stage: impl Into<String>) -> Self {
        GgmError::Stage {
            stage: stage.into(),
            source: Box::new(self),
        }
    }

    /// Innermost error once stage labels are peeled off.
    pub fn root(&self) -> &GgmError {
        match self {
            GgmError::Stage { source, .. } => source.root(),
            other => other,
        }
    }

    /// True for failures of the numerics rather than of inputs or IO.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            GgmError::NotPositiveDefinite
                | GgmError::RankDeficient
                | GgmError::ZeroVarianceColumn(_)
                | GgmError::NonConverged { .. }
                | GgmError::TuningFailed
                | GgmError::ExperimentFailed { .. }
        )
    }
}

pub type Result<T, E = GgmError> = std::result::Result<T, E>;
