use std::path::PathBuf;

use thiserror::Error;

/// Every failure the toolkit can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("paired clouds differ in size ({source_len} vs {target_len})")]
    PairMismatch {
        source_len: usize,
        target_len: usize,
    },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("branch {0} has no points")]
    MissingBranch(i32),

    #[error("no points survive cluster filtering")]
    EmptyAfterFilter,

    #[error("cluster {cluster} centroid lies on the dividing plane")]
    AmbiguousSide { cluster: i32 },

    #[error("one side of the cage has no clusters")]
    MissingSide,

    #[error("cloud carries no sternum points (label 0)")]
    MissingSternum,

    #[error("graph mismatch: {0}")]
    GraphMismatch(String),

    #[error("fewer than 3 points within {radius} mm of waypoint {index}")]
    SparseNeighborhood { index: usize, radius: f64 },

    #[error("numerical failure: {0}")]
    NumericalFailure(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("rejection sampling starved: {accepted} accepted of {proposed} proposals")]
    ManifoldStarved { accepted: usize, proposed: usize },

    #[error("truth mask has no boundary")]
    UndefinedBoundary,

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable machine-readable code used in CLI error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyInput(_) => "empty_input",
            Error::PairMismatch { .. } => "pair_mismatch",
            Error::DegenerateGeometry(_) => "degenerate_geometry",
            Error::InvalidParams(_) => "invalid_params",
            Error::MissingBranch(_) => "missing_branch",
            Error::EmptyAfterFilter => "empty_after_filter",
            Error::AmbiguousSide { .. } => "ambiguous_side",
            Error::MissingSide => "missing_side",
            Error::MissingSternum => "missing_sternum",
            Error::GraphMismatch(_) => "graph_mismatch",
            Error::SparseNeighborhood { .. } => "sparse_neighborhood",
            Error::NumericalFailure(_) => "numerical_failure",
            Error::DimensionMismatch(_) => "dimension_mismatch",
            Error::ManifoldStarved { .. } => "manifold_starved",
            Error::UndefinedBoundary => "undefined_boundary",
            Error::UndefinedMetric(_) => "undefined_metric",
            Error::Parse { .. } => "parse_error",
            Error::Io { .. } => "io_error",
            Error::Json { .. } => "json_error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
