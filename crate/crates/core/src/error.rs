use thiserror::Error;

/// Errors raised by the numerical and simulation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("eigenvalue bracket does not contain a sign change: {0}")]
    Bracket(String),
    #[error("grid too coarse: {0}")]
    Resolution(String),
    #[error("wrong regime: {0}")]
    Regime(String),
    #[error("quadrature failure: {0}")]
    Quadrature(String),
    #[error("degenerate Wronskian at lambda = {lambda}")]
    DegenerateWronskian { lambda: f64 },
    #[error("singular argument: {0}")]
    SingularArgument(String),
    #[error("argument outside domain: {0}")]
    Domain(String),
    #[error("Grey's condition fails: {0}")]
    NoExtinction(String),
    #[error("offspring law truncation tail too heavy: {0}")]
    Truncation(String),
    #[error("unsupported functional: {0}")]
    UnsupportedFunctional(String),
    #[error("matrix is not symmetric at ({i}, {j})")]
    Asymmetric { i: usize, j: usize },
    #[error("nonzero diagonal entry at {i}")]
    NonzeroDiagonal { i: usize },
    #[error("planar ultrametric property fails for triple ({i}, {l}, {j})")]
    PlanarViolation { i: usize, l: usize, j: usize },
    #[error("negative entry at ({i}, {j})")]
    NegativeEntry { i: usize, j: usize },
    #[error("sub-matrix depth {depth} is not below tau = {tau}")]
    Nesting { depth: f64, tau: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("combinatorial guard: k = {0} exceeds the limit")]
    TooManyLeaves(usize),
    #[error("population exceeded the particle cap ({0})")]
    Explosion(usize),
    #[error("population is extinct")]
    Extinct,
    #[error("horizon too short: {0}")]
    HorizonTooShort(String),
    #[error("estimators disagree: {0}")]
    Inconsistent(String),
    #[error("insufficient statistics: {0}")]
    InsufficientStatistics(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown experiment `{0}`")]
    UnknownExperiment(String),
    #[error("output path {0} is not writable")]
    Unwritable(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
