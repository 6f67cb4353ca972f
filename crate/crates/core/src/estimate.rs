//! End-to-end estimation: surrogate smoothing, noise variances, profile
//! optimization, state reconstruction, model selection and Wald intervals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::likelihood::{hessian, wald_intervals, ProfileContext, ProfileObjective, WaldInterval};
use crate::models::{normalize_unit, parameter_blocks, ModelSpec, ParamInfo};
use crate::operators::{DifferenceOperator, Stencil};
use crate::optimizer::{minimize_blocks, minimize_objective, OptimizationReport, OptimizerConfig};
use crate::smoother::{fit_surrogate, Smoothing, SplineBasis, Surrogate};

/// How the noise variances σ_j² are obtained. They stay fixed during the
/// optimization.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum VariancePolicy {
    /// Per-state surrogate residual variance, pooled if the model asks for it.
    #[default]
    Auto,
    /// Per-state surrogate residual variance.
    PerState,
    /// One variance pooled over all states.
    Shared,
    /// User-supplied; a single value is broadcast to every state.
    Known(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RkhsConfig {
    pub lambda: f64,
    pub variance: VariancePolicy,
    pub smoothing: Smoothing,
    pub stencil: Stencil,
    pub optimizer: OptimizerConfig,
    /// Optimize independent parameter blocks separately when the model allows.
    pub separate_blocks: bool,
    /// Compute the Hessian, covariance and Wald intervals.
    pub covariance: bool,
    pub level: f64,
}

impl Default for RkhsConfig {
    fn default() -> Self {
        Self {
            lambda: 100.0,
            variance: VariancePolicy::Auto,
            smoothing: Smoothing::default(),
            stencil: Stencil::default(),
            optimizer: OptimizerConfig::default(),
            separate_blocks: true,
            covariance: true,
            level: 0.95,
        }
    }
}

/// 13 log-spaced values from 1e-2 to 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..13).map(|i| 10f64.powf(-2.0 + 0.5 * i as f64)).collect()
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub model: String,
    pub param_info: Vec<ParamInfo>,
    pub params: Vec<f64>,
    /// Operator coefficients per equation.
    pub theta: Vec<Vec<f64>>,
    pub alpha: Vec<DVector<f64>>,
    /// Reconstructed states x̂, m × n.
    pub states: DMatrix<f64>,
    pub forcing: Vec<DVector<f64>>,
    pub sigma2: Vec<f64>,
    pub df: Vec<f64>,
    pub objective: f64,
    pub aic: f64,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub covariance: Option<DMatrix<f64>>,
    pub wald: Vec<WaldInterval>,
    /// Why the covariance could not be computed, when it could not.
    pub covariance_note: Option<String>,
    /// Normalized latent input on the observation grid, for latent models.
    pub latent: Option<DVector<f64>>,
    pub surrogate_smoothing: Vec<f64>,
    pub surrogate_values: DMatrix<f64>,
}

impl FitResult {
    /// Reconstructed state values at the first observation time.
    pub fn initial_conditions(&self) -> Vec<f64> {
        self.states.column(0).iter().copied().collect()
    }

    pub fn sum_df(&self) -> f64 {
        self.df.iter().sum()
    }
}

/// Surrogate, variances and difference operator shared by fits at several λ.
pub struct Prepared<'a> {
    model: &'a dyn ModelSpec,
    obs: &'a ObservationSet,
    surrogate: Surrogate,
    surrogate_values: DMatrix<f64>,
    sigma2: Vec<f64>,
    diff: DifferenceOperator,
}

impl<'a> Prepared<'a> {
    pub fn new(
        model: &'a dyn ModelSpec,
        obs: &'a ObservationSet,
        config: &RkhsConfig,
    ) -> Result<Self> {
        let m = model.n_equations();
        if obs.n_states() != m {
            return Err(Error::Dimension(format!(
                "model `{}` has {m} equations but the data have {} states",
                model.name(),
                obs.n_states()
            )));
        }
        let basis = SplineBasis::at_grid(obs.grid())?;
        let surrogate = fit_surrogate(obs, &basis, None, &config.smoothing)?;
        let surrogate_values = surrogate.eval(obs.grid().times())?;
        let shared = match &config.variance {
            VariancePolicy::Auto => model.shared_variance(),
            VariancePolicy::Shared => true,
            _ => false,
        };
        let sigma2 = match &config.variance {
            VariancePolicy::Known(v) if v.len() == 1 => vec![v[0]; m],
            VariancePolicy::Known(v) => v.clone(),
            _ if shared => vec![surrogate.pooled_variance(); m],
            _ => surrogate.residual_variances(),
        };
        // A surrogate that interpolates leaves no residual; keep the variance
        // strictly positive.
        let sigma2 = sigma2
            .into_iter()
            .map(|s| if s > 0.0 { s } else { f64::EPSILON })
            .collect();
        let diff = DifferenceOperator::new(obs.grid(), config.stencil)?;
        Ok(Self {
            model,
            obs,
            surrogate,
            surrogate_values,
            sigma2,
            diff,
        })
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn surrogate(&self) -> &Surrogate {
        &self.surrogate
    }

    pub fn context(&self, lambda: f64) -> Result<ProfileContext<'a>> {
        ProfileContext::new(
            self.model,
            self.obs,
            self.surrogate_values.clone(),
            lambda,
            self.sigma2.clone(),
            self.diff.clone(),
        )
    }

    /// Fits at `lambda`. Covariance is computed when `config.covariance`.
    pub fn fit(&self, lambda: f64, config: &RkhsConfig) -> Result<FitResult> {
        let ctx = self.context(lambda)?;
        let (params, reports) = optimize(&ctx, config)?;
        let mut result = self.assemble(&ctx, params, &reports)?;
        if config.covariance {
            attach_covariance(&ctx, &mut result, config);
        }
        Ok(result)
    }

    fn assemble(
        &self,
        ctx: &ProfileContext<'_>,
        params: Vec<f64>,
        reports: &[OptimizationReport],
    ) -> Result<FitResult> {
        let model = self.model;
        let recon = ctx.reconstruct_states(&params)?;
        let forcing = ctx.forcing(&params)?;
        let df = ctx.effective_df(&params)?;
        let objective = ctx.objective(&params)?;
        let n = self.obs.n_times();
        let m = model.n_equations();
        let mut states = DMatrix::zeros(m, n);
        for (j, r) in recon.iter().enumerate() {
            states.row_mut(j).copy_from(&r.states.transpose());
        }
        let latent = match model.latent_profile(&params, self.obs.grid().times()) {
            Some(eta) => Some(normalize_unit(&eta?)),
            None => None,
        };
        let converged = reports.iter().all(|r| r.converged);
        let iterations = reports
            .iter()
            .map(|r| {
                r.starts
                    .iter()
                    .find(|s| s.end == r.best)
                    .map_or(0, |s| s.iterations)
            })
            .sum();
        let gradient_norm = reports
            .iter()
            .map(|r| r.gradient_norm * r.gradient_norm)
            .sum::<f64>()
            .sqrt();
        Ok(FitResult {
            model: model.name().to_string(),
            param_info: model.params(),
            theta: (0..m)
                .map(|j| model.operator_coefficients(&params, j))
                .collect(),
            alpha: recon.into_iter().map(|r| r.alpha).collect(),
            states,
            forcing,
            sigma2: self.sigma2.clone(),
            aic: crate::likelihood::aic(objective, &df),
            df,
            objective,
            lambda: ctx.lambda(),
            converged,
            iterations,
            gradient_norm,
            covariance: None,
            wald: params
                .iter()
                .map(|&estimate| WaldInterval {
                    estimate,
                    stderr: None,
                    lower: None,
                    upper: None,
                })
                .collect(),
            covariance_note: Some("not computed".into()),
            latent,
            surrogate_smoothing: self.surrogate.fits().iter().map(|f| f.smoothing).collect(),
            surrogate_values: self.surrogate_values.clone(),
            params,
        })
    }

    /// Fits at every λ in `grid` and selects the minimum AIC.
    pub fn select_lambda(&self, grid: &[f64], config: &RkhsConfig) -> Result<LambdaPath> {
        if grid.is_empty() {
            return Err(Error::InvalidParameter("empty lambda grid".into()));
        }
        if let Some(l) = grid.iter().find(|l| !(**l > 0.0) || !l.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "lambda values must be positive, got {l}"
            )));
        }
        let no_cov = RkhsConfig {
            covariance: false,
            ..config.clone()
        };
        let mut fits = grid
            .par_iter()
            .map(|&lambda| self.fit(lambda, &no_cov))
            .collect::<Result<Vec<_>>>()?;
        let best = fits
            .iter()
            .enumerate()
            .filter(|(_, f)| f.aic.is_finite())
            .min_by(|a, b| a.1.aic.total_cmp(&b.1.aic))
            .map(|(i, _)| i)
            .ok_or(Error::NoFeasibleStart)?;
        if config.covariance {
            let ctx = self.context(fits[best].lambda)?;
            attach_covariance(&ctx, &mut fits[best], config);
        }
        Ok(LambdaPath { fits, best })
    }
}

#[derive(Debug, Clone)]
pub struct LambdaPath {
    pub fits: Vec<FitResult>,
    pub best: usize,
}

impl LambdaPath {
    pub fn best_fit(&self) -> &FitResult {
        &self.fits[self.best]
    }

    pub fn into_best(mut self) -> FitResult {
        self.fits.swap_remove(self.best)
    }
}

fn optimize(
    ctx: &ProfileContext<'_>,
    config: &RkhsConfig,
) -> Result<(Vec<f64>, Vec<OptimizationReport>)> {
    let model = ctx.model();
    let dim = model.n_params();
    let mut opt = config.optimizer.clone();
    if opt.start_box.is_none() {
        opt.start_box = Some(model.default_start_box());
    }
    let blocks = parameter_blocks(model);
    if config.separate_blocks && blocks.len() > 1 {
        let param_blocks: Vec<Vec<usize>> = blocks.iter().map(|(_, p)| p.clone()).collect();
        let f = |b: usize, p: &[f64]| ctx.soft_objective(p, &blocks[b].0);
        let report = minimize_blocks(&param_blocks, dim, &f, &opt)?;
        let reports = report.blocks.into_iter().map(|(_, r)| r).collect();
        Ok((report.params, reports))
    } else {
        let objective = ProfileObjective {
            context: ctx,
            equations: (0..model.n_equations()).collect(),
        };
        let report = minimize_objective(&objective, dim, &opt)?;
        Ok((report.best.clone(), vec![report]))
    }
}

fn attach_covariance(ctx: &ProfileContext<'_>, result: &mut FitResult, config: &RkhsConfig) {
    let objective = ProfileObjective {
        context: ctx,
        equations: (0..ctx.model().n_equations()).collect(),
    };
    let outcome = hessian(&objective, &result.params, config.optimizer.gradient_step)
        .and_then(|h| wald_intervals(&(-h), &result.params, config.level));
    match outcome {
        Ok(table) => {
            result.covariance = Some(table.covariance);
            result.wald = table.intervals;
            result.covariance_note = None;
        }
        Err(e) => {
            result.covariance_note = Some(e.to_string());
        }
    }
}

/// Fits at a single λ.
pub fn fit_rkhs(
    model: &dyn ModelSpec,
    obs: &ObservationSet,
    config: &RkhsConfig,
) -> Result<FitResult> {
    Prepared::new(model, obs, config)?.fit(config.lambda, config)
}

/// Fits over a λ grid and returns the AIC path.
pub fn select_lambda(
    model: &dyn ModelSpec,
    obs: &ObservationSet,
    grid: &[f64],
    config: &RkhsConfig,
) -> Result<LambdaPath> {
    Prepared::new(model, obs, config)?.select_lambda(grid, config)
}
