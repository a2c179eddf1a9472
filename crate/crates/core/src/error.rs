use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter failed validation. `field` is a dotted path such as `solver.K`.
    #[error("invalid parameter `{field}`: {reason}")]
    InvalidParameter { field: String, reason: String },

    #[error("model error: {0}")]
    Model(String),

    #[error("{failed} of {total} trajectories diverged (first failure: path {first_path} at step {first_step})")]
    SimulationFailed {
        failed: usize,
        total: usize,
        first_path: usize,
        first_step: usize,
    },

    #[error("coefficients for step {step} were not fitted (valid from step {valid_from})")]
    StaleCoefficients { step: usize, valid_from: usize },

    #[error("no active trajectories at step {step}; use freeze-all mode or a drift change that keeps paths inside the domain longer")]
    NoActiveTrajectories { step: usize },

    #[error(
        "backward recursion diverged at step {step} (non-finite or exploding regression output)"
    )]
    NonFiniteRegression { step: usize },

    #[error("estimate {value:.4} outside the admissible range [{lo:.4}, {hi:.4}]; the backward recursion diverged")]
    ImplausibleValue { value: f64, lo: f64, hi: f64 },

    #[error("importance sampling failed: {0}")]
    EstimatorFailure(String),

    #[error("PDE solution left [0, 1] (value {value:.3e} at x = {x:.4}, t = {t:.4}); refine n_x or dt_pde")]
    PdeUnstable { value: f64, x: f64, t: f64 },

    #[error("no trajectory left the domain; early-horizon mode is not applicable")]
    NoExits,

    #[error("{failed} of {total} repetitions failed; first error: {first}")]
    ExperimentFailed {
        failed: usize,
        total: usize,
        first: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad input rather than by the numerics.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::InvalidParameter { .. } | Error::Json(_))
    }
}
