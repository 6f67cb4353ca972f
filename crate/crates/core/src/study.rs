//! Replicated simulation studies comparing the penalized estimator with the
//! solver-based baseline.

use std::time::Instant;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::estimate::{Prepared, RkhsConfig};
use crate::models::ModelSpec;
use crate::operators::TimeGrid;
use crate::optimizer::OptimizerConfig;
use crate::rng::derive_seed;
use crate::simulate::{add_noise, integrate_rk4, mle_fit};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationConfig {
    pub params: Vec<f64>,
    pub x0: Vec<f64>,
    pub t_start: f64,
    pub t_end: f64,
    pub n: usize,
    pub sigma: f64,
    pub replicates: usize,
    pub seed: u64,
    pub substeps: usize,
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_end > self.t_start) {
            return Err(Error::InvalidParameter(format!(
                "t_end ({}) must exceed t_start ({})",
                self.t_end, self.t_start
            )));
        }
        if self.n < 3 {
            return Err(Error::InvalidParameter(format!(
                "need n >= 3, got {}",
                self.n
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sigma must be >= 0, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::uniform(self.t_start, self.t_end, self.n)
    }

    /// Seed of replicate `index`.
    pub fn replicate_seed(&self, index: usize) -> u64 {
        derive_seed(self.seed, index as u64)
    }
}

/// Noiseless trajectory and noisy observations for one replicate.
pub fn simulate_replicate(
    model: &dyn ModelSpec,
    sim: &SimulationConfig,
    index: usize,
) -> Result<(DMatrix<f64>, ObservationSet)> {
    sim.validate()?;
    let grid = sim.grid()?;
    let truth = integrate_rk4(model, &sim.params, &sim.x0, &grid, sim.substeps)?;
    let obs = add_noise(&truth, &grid, sim.sigma, sim.replicate_seed(index))?;
    Ok((truth, obs))
}

/// Which estimators a study runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Methods {
    /// Penalized fit; with a λ grid the minimum-AIC λ is used.
    pub rkhs: Option<(RkhsConfig, Option<Vec<f64>>)>,
    /// Baseline with known noise variance `sigma²`.
    pub mle: Option<OptimizerConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub params: Option<Vec<f64>>,
    pub seconds: f64,
    pub converged: bool,
    pub lambda: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    pub rkhs: Option<MethodOutcome>,
    pub mle: Option<MethodOutcome>,
}

/// Runs one replicate of every configured method. Per-replicate optimizer
/// seeds derive from the replicate seed.
pub fn run_replicate(
    model: &dyn ModelSpec,
    sim: &SimulationConfig,
    methods: &Methods,
    index: usize,
) -> Result<ReplicateOutcome> {
    let (_, obs) = simulate_replicate(model, sim, index)?;
    let seed = sim.replicate_seed(index);

    let rkhs = methods.rkhs.as_ref().map(|(config, grid)| {
        let mut config = config.clone();
        config.optimizer.seed = derive_seed(seed, 1);
        let start = Instant::now();
        let outcome = Prepared::new(model, &obs, &config).and_then(|prep| match grid {
            Some(grid) => prep.select_lambda(grid, &config).map(|p| p.into_best()),
            None => prep.fit(config.lambda, &config),
        });
        let seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok(fit) => MethodOutcome {
                params: Some(fit.params.clone()),
                seconds,
                converged: fit.converged,
                lambda: Some(fit.lambda),
                error: None,
            },
            Err(e) => MethodOutcome {
                params: None,
                seconds,
                converged: false,
                lambda: None,
                error: Some(e.to_string()),
            },
        }
    });

    let mle = methods.mle.as_ref().map(|config| {
        let mut config = config.clone();
        config.seed = derive_seed(seed, 2);
        let sigma2 = vec![(sim.sigma * sim.sigma).max(f64::EPSILON); model.n_equations()];
        let start = Instant::now();
        let outcome = mle_fit(&obs, model, &sigma2, &config, sim.substeps);
        let seconds = start.elapsed().as_secs_f64();
        match outcome {
            Ok(fit) => MethodOutcome {
                params: Some(fit.params),
                seconds,
                converged: fit.converged,
                lambda: None,
                error: None,
            },
            Err(e) => MethodOutcome {
                params: None,
                seconds,
                converged: false,
                lambda: None,
                error: Some(e.to_string()),
            },
        }
    });

    Ok(ReplicateOutcome {
        index,
        seed,
        rkhs,
        mle,
    })
}

/// All replicates, in parallel, returned in index order.
pub fn run_study(
    model: &dyn ModelSpec,
    sim: &SimulationConfig,
    methods: &Methods,
) -> Result<Vec<ReplicateOutcome>> {
    sim.validate()?;
    if sim.replicates == 0 {
        return Err(Error::InvalidParameter(
            "replicate count must be at least 1".into(),
        ));
    }
    (0..sim.replicates)
        .into_par_iter()
        .map(|i| run_replicate(model, sim, methods, i))
        .collect()
}

/// Error statistics of one parameter over successful replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub mean_abs_error: f64,
    pub sd_abs_error: f64,
    pub mse: f64,
    /// Standard deviation of the squared errors.
    pub sd_squared_error: f64,
    pub count: usize,
}

/// Per-parameter summary of `estimates` against `truth`.
pub fn summarize(estimates: &[Vec<f64>], truth: &[f64]) -> Vec<ParamSummary> {
    truth
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let abs: Vec<f64> = estimates.iter().map(|e| (e[k] - t).abs()).collect();
            let sq: Vec<f64> = abs.iter().map(|a| a * a).collect();
            let (mean_abs_error, sd_abs_error) = mean_sd(&abs);
            let (mse, sd_squared_error) = mean_sd(&sq);
            ParamSummary {
                mean_abs_error,
                sd_abs_error,
                mse,
                sd_squared_error,
                count: abs.len(),
            }
        })
        .collect()
}

/// Mean and sample standard deviation.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    if v.len().is_multiple_of(2) {
        0.5 * (v[mid - 1] + v[mid])
    } else {
        v[mid]
    }
}

/// Successful estimates of a method across replicates.
pub fn collect_estimates(
    outcomes: &[ReplicateOutcome],
    pick: impl Fn(&ReplicateOutcome) -> Option<&MethodOutcome>,
) -> Vec<Vec<f64>> {
    outcomes
        .iter()
        .filter_map(|o| pick(o).and_then(|m| m.params.clone()))
        .collect()
}
