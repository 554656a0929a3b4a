use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid transition matrix: {0}")]
    InvalidChain(String),

    #[error("chain is not ergodic: {0}")]
    Ergodicity(String),

    #[error("unstable: {0}")]
    Stability(String),

    #[error("truncation level {level} misses tail tolerance {tol:e}; need level >= {required}")]
    Truncation { level: usize, tol: f64, required: usize },

    #[error(
        "½I + A is not Hurwitz (ρ₀ = {rho0}); the mean-square error decays at rate n^-{exponent} instead of 1/n"
    )]
    RateDegenerate { rho0: f64, exponent: f64 },

    #[error("second-order term needs I + A Hurwitz (ρ₀ = {rho0} <= 1)")]
    FinerBoundUnavailable { rho0: f64 },

    #[error("degenerate TD basis: {0}")]
    DegenerateBasis(String),

    #[error("matrix gain singular at step {step}")]
    SingularGain { step: usize },

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("work budget exceeded: {work:e} > {budget:e}")]
    Budget { work: f64, budget: f64 },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
