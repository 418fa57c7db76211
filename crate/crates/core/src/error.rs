use thiserror::Error;

/// Errors produced across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("point maps to the plane at infinity (|w| = {0:e})")]
    PointAtInfinity(f64),
    #[error("camera {0} has a singular left 3x3 block")]
    SingularCamera(usize),
    #[error("camera centers coincide")]
    CoincidentCenters,
    #[error("matrix has fewer than two significant singular values")]
    DegenerateMatrix,
    #[error("rotation angle too close to pi for a unique logarithm")]
    AngleNearPi,
    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
    #[error("degenerate two-view geometry: {0}")]
    DegenerateGeometry(String),
    #[error("rank deficient linear system")]
    RankDeficient,
    #[error("linear solve failed")]
    LinearSolveFailure,
    #[error("need at least 3 cameras, got {0}")]
    InsufficientCameras(usize),
    #[error("not upgradable: {0}")]
    NotUpgradable(String),
    #[error("degenerate scene: {0}")]
    DegenerateScene(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
