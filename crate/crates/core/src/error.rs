use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("grid must have at least 2 cells per direction, got {nx}x{ny}")]
    GridTooSmall { nx: usize, ny: usize },

    #[error("point ({x1}, {x2}) lies outside the unit square")]
    OutsideDomain { x1: f64, x2: f64 },

    #[error("kernel hyperparameters must be positive (sigma = {sigma}, length = {length})")]
    InvalidKernel { sigma: f64, length: f64 },

    #[error("negative distance {0} passed to kernel")]
    NegativeDistance(f64),

    #[error("{what}: expected length {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("observation covariance is singular; duplicate noiseless locations: {duplicates:?}")]
    ConditioningFailed { duplicates: Vec<[f64; 2]> },

    #[error("covariance has no positive eigenvalues")]
    DegenerateField,

    #[error("ensemble size {n_ens} must exceed the number of u observations ({n_obs})")]
    RankDeficientEnsemble { n_ens: usize, n_obs: usize },

    #[error("conditional covariance of u vanished after {n_obs} observations; increase the ensemble size")]
    VanishingCovariance { n_obs: usize },

    #[error("forward solve failed for ensemble member {index}: {source}")]
    EnsembleMember {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("linear solver breakdown: {0}")]
    SolverBreakdown(String),

    #[error("subsampling factor {factor} does not divide grid {nx}x{ny}")]
    InvalidSubsample { factor: usize, nx: usize, ny: usize },

    #[error("optimizer did not converge: {message} (best objective {best_value}, gradient norm {grad_norm})")]
    NotConverged {
        message: String,
        best: Vec<f64>,
        best_value: f64,
        grad_norm: f64,
    },

    #[error("line search produced a non-finite objective at {at:?}")]
    NonFiniteObjective { at: Vec<f64> },

    #[error("observation {index} has value {value}, which is neither facies value")]
    NonBinaryObservation { index: usize, value: f64 },

    #[error("reference field has zero norm")]
    ZeroReferenceNorm,

    #[error("factorization failed after jitter escalation up to {jitter}")]
    FactorizationFailed { jitter: f64 },

    #[error("malformed input: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
