use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{model}: point {point:?} lies outside the single-phase domain")]
    Domain { model: String, point: Vec<f64> },

    #[error("{model}: entropy Hessian is singular or ill-conditioned at {point:?} (condition {condition:.3e})")]
    SingularHessian {
        model: String,
        point: Vec<f64>,
        condition: f64,
    },

    #[error("{model}: inconsistent model input: {detail}")]
    InconsistentModel { model: String, detail: String },

    #[error("{context}: no convergence after {iterations} iterations (residual {residual:.3e})")]
    NoConvergence {
        context: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("{context}: iterate escaped the model domain")]
    DomainEscape { context: &'static str },

    #[error("{context}: time step {dt:.3e} exceeds the stability bound {bound:.3e}")]
    StabilityViolation {
        context: &'static str,
        dt: f64,
        bound: f64,
    },

    #[error("semigroup: negative time {0}")]
    NegativeTime(f64),

    #[error("linop: eigenvalue solver failed for a {0}x{0} generator")]
    EigSolverFailure(usize),

    #[error("covariance: generator is not dissipative (spectral abscissa {0:.3e} >= 0)")]
    UnstableGenerator(f64),

    #[error("covariance: Lyapunov residual {residual:.3e} exceeds {bound:.3e}")]
    ResidualTooLarge { residual: f64, bound: f64 },

    #[error("covariance: quadrature tail {tail:.3e} above rtol {rtol:.1e}; increase t_max beyond {t_max}")]
    TailNotConverged { tail: f64, rtol: f64, t_max: f64 },

    #[error("spde: non-finite state in path {path} at step {step}")]
    NonFiniteState { path: usize, step: usize },

    #[error("{context}: insufficient samples ({have}, need {need})")]
    InsufficientSamples {
        context: &'static str,
        have: usize,
        need: usize,
    },

    #[error("invalid input: {0}")]
    InvalidInput(String),
}
