use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("operator with coefficients {theta:?} is singular or ill-conditioned (condition estimate {condition:e})")]
    SingularOperator { theta: Vec<f64>, condition: f64 },

    #[error("smoother normal equations are rank deficient; use a positive smoothing weight")]
    UnderdeterminedSmoother,

    #[error("time {time} lies outside the spline span [{lo}, {hi}]")]
    OutOfSpan { time: f64, lo: f64, hi: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerical gradient unavailable at coordinate {coordinate}: objective infinite on both sides")]
    GradientUnavailable { coordinate: usize },

    #[error("no feasible start: every start point evaluated to +inf")]
    NoFeasibleStart,

    #[error("division guard triggered in equation {equation}: saturation denominator {value:e} at t = {time}")]
    DivisionGuard {
        equation: usize,
        time: f64,
        value: f64,
    },

    #[error("covariance unavailable: Hessian is singular along {} direction(s)", null_directions.len())]
    CovarianceUnavailable { null_directions: Vec<Vec<f64>> },

    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("model `{0}` has no reference vector field")]
    NoVectorField(String),
}

pub type Result<T> = std::result::Result<T, Error>;
