use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("non-finite surface value at node {node} (base point {base:?})")]
    NonFiniteSurface { node: usize, base: Vec<f64> },

    #[error("unsupported ambient dimension {0}; only n+1 in {{2, 3}} is meshed")]
    UnsupportedDimension(usize),

    #[error("point {point:?} is within {distance:.3e} of boundary node {node}; use a nontangential probe")]
    TooCloseToBoundary { point: Vec<f64>, node: usize, distance: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("ball too small: {found} nodes in B(x_{node}, {radius:.3e}), need at least {needed}")]
    BallTooSmall { node: usize, radius: f64, found: usize, needed: usize },

    #[error("empty ball around node {node} with radius {radius:.3e}")]
    EmptyBall { node: usize, radius: f64 },

    #[error("empty sampling grid: {0}")]
    EmptyGrid(String),

    #[error("dyadic level {0} has no cubes")]
    EmptyLevel(i32),

    #[error("cube {cube} is degenerate: {reason}")]
    DegenerateCube { cube: usize, reason: String },

    #[error("rank-deficient covariance while fitting a plane to cube {0}")]
    RankDeficient(usize),

    #[error("plane-fit flatness {eps:.3e} on cube {cube} exceeds alpha/8 = {limit:.3e}")]
    NotFlatEnough { cube: usize, eps: f64, limit: f64 },

    #[error("stopping-time construction: {0}")]
    Construction(String),

    #[error("matrix with {entries} entries exceeds the configured cap of {cap}; use a coarser mesh")]
    MemoryGuard { entries: usize, cap: usize },

    #[error("power iteration did not converge in {iterations} iterations (last estimate {estimate:.6e})")]
    NoConvergence { iterations: usize, estimate: f64 },

    #[error("near-singular system: smallest singular value {sigma_min:.3e}")]
    NearSingular { sigma_min: f64 },

    #[error("factorization failed: {0}")]
    Factorization(String),

    #[error("Neumann datum far from compatible: mean component {mean:.3e} vs norm {norm:.3e}")]
    IncompatibleNeumann { mean: f64, norm: f64 },

    #[error("graph misses the ball B(Q) of cube {0}")]
    GraphMissesBall(usize),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter { name, reason: reason.into() }
}
