use thiserror::Error;

/// Errors produced by the library.
///
/// Every variant corresponds to a violated precondition or a numerical
/// failure; none of them are retried internally.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A model file field failed validation. `path` is a JSON pointer-like
    /// path (`$.P[1][0]`).
    #[error("invalid model at {path}: {reason}")]
    InvalidModel { path: String, reason: String },

    #[error("phase-type mean is not 1 (zeta = {zeta}); enable normalization to rescale service rates")]
    NonUnitMeanPhase { zeta: f64 },

    #[error("routing matrix I - P is singular or ill-conditioned (condition number {condition:e})")]
    SingularRouting { condition: f64 },

    #[error("covariance is not uniformly elliptic: min eigenvalue {min_eig:e} <= threshold {threshold:e}")]
    NonEllipticCovariance { min_eig: f64, threshold: f64 },

    #[error("mollification width must lie in (0, 1), got {0}")]
    BadEpsilon(f64),

    #[error("Hessian is not symmetric (max asymmetry {0:e})")]
    AsymmetricHessian(f64),

    #[error("target error delta must lie in (0, 1), got {0}")]
    BadDelta(f64),

    #[error("schedule exponent varsigma must lie in (0, 1), got {0}")]
    BadVarsigma(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite state at step {step}")]
    NonFinite { step: u64 },

    #[error("accumulator is empty")]
    EmptyAccumulator,

    #[error("observable {0} is not tracked by this accumulator")]
    UntrackedObservable(String),

    #[error("need at least {needed} batches, got {got}")]
    TooFewBatches { needed: usize, got: usize },

    #[error("maximum lag {max_lag} must be below n/10 = {limit}")]
    LagTooLarge { max_lag: usize, limit: usize },

    #[error("series depth {depth} leaves a tail bound {tail:e} above tolerance {tolerance:e}")]
    DepthTooSmall { depth: usize, tail: f64, tolerance: f64 },

    #[error("variance estimate is zero")]
    ZeroVariance,

    #[error(
        "no feasible Lyapunov matrix: best candidate has strict-condition eigenvalue {strict_max:e} \
         and semidefinite-condition eigenvalue {semi_max:e}"
    )]
    NoFeasibleQ { strict_max: f64, semi_max: f64 },

    #[error("drift condition violated: no positive decay rate fits (best outer-shell ratio {0:e})")]
    DriftConditionViolated(f64),

    #[error("bad interval [{s}, {t}]")]
    BadInterval { s: f64, t: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
