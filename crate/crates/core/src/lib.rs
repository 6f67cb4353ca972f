//! Parameter estimation for systems of ordinary differential equations by
//! maximizing an RKHS-penalized likelihood.
//!
//! The ODE enters only as a penalty built from a discrete difference operator,
//! so no solver runs inside the estimation loop. A solver-based maximum
//! likelihood baseline and a replicate harness are included for comparison.

pub mod data;
pub mod error;
pub mod estimate;
pub mod likelihood;
pub mod models;
pub mod operators;
pub mod optimizer;
pub mod rng;
pub mod simulate;
pub mod smoother;
pub mod study;

pub use data::ObservationSet;
pub use error::{Error, Result};
pub use estimate::{
    default_lambda_grid, fit_rkhs, select_lambda, FitResult, LambdaPath, RkhsConfig, VariancePolicy,
};
pub use likelihood::{ProfileContext, WaldInterval};
pub use models::{
    model_by_name, model_exponential, model_lotka_volterra, model_tf_network, ExponentialDecay,
    LatentInput, LotkaVolterra, ModelSpec, ParamInfo, ParamRole, TfNetwork,
};
pub use operators::{DifferenceOperator, KernelInverse, OperatorMatrix, Stencil, TimeGrid};
pub use optimizer::{OptimizationReport, OptimizerConfig};
pub use simulate::{add_noise, integrate_rk4, mle_fit, MleFit};
pub use smoother::{Smoothing, SplineBasis, Surrogate};
