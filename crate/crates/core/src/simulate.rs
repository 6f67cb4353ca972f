//! Reference integration, noise injection and the solver-in-the-loop
//! maximum likelihood baseline.

use nalgebra::DMatrix;
use rand_distr::{Distribution, Normal};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::operators::TimeGrid;
use crate::optimizer::{minimize, OptimizationReport, OptimizerConfig};
use crate::rng::seeded;

pub const DEFAULT_SUBSTEPS: usize = 20;

/// Classical RK4 with `substeps` uniform steps between adjacent grid times.
/// Returns the m × n trajectory, starting with `x0` at `grid.first()`.
pub fn integrate_rk4(
    model: &dyn ModelSpec,
    params: &[f64],
    x0: &[f64],
    grid: &TimeGrid,
    substeps: usize,
) -> Result<DMatrix<f64>> {
    let m = model.n_equations();
    if x0.len() != m {
        return Err(Error::Dimension(format!(
            "{} initial values for {m} equations",
            x0.len()
        )));
    }
    if substeps == 0 {
        return Err(Error::InvalidParameter(
            "substeps must be at least 1".into(),
        ));
    }
    let times = grid.times();
    let mut out = DMatrix::zeros(m, times.len());
    let mut x = x0.to_vec();
    out.column_mut(0).copy_from_slice(&x);

    let mut k1 = vec![0.0; m];
    let mut k2 = vec![0.0; m];
    let mut k3 = vec![0.0; m];
    let mut k4 = vec![0.0; m];
    let mut tmp = vec![0.0; m];
    for i in 1..times.len() {
        let h = (times[i] - times[i - 1]) / substeps as f64;
        for s in 0..substeps {
            let t = times[i - 1] + h * s as f64;
            model.vector_field(params, t, &x, &mut k1)?;
            for r in 0..m {
                tmp[r] = x[r] + 0.5 * h * k1[r];
            }
            model.vector_field(params, t + 0.5 * h, &tmp, &mut k2)?;
            for r in 0..m {
                tmp[r] = x[r] + 0.5 * h * k2[r];
            }
            model.vector_field(params, t + 0.5 * h, &tmp, &mut k3)?;
            for r in 0..m {
                tmp[r] = x[r] + h * k3[r];
            }
            model.vector_field(params, t + h, &tmp, &mut k4)?;
            for r in 0..m {
                x[r] += h / 6.0 * (k1[r] + 2.0 * k2[r] + 2.0 * k3[r] + k4[r]);
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::IntegrationDiverged { time: t + h });
            }
        }
        out.column_mut(i).copy_from_slice(&x);
    }
    Ok(out)
}

/// Adds i.i.d. `N(0, σ²)` noise; deterministic per seed.
pub fn add_noise(
    trajectory: &DMatrix<f64>,
    grid: &TimeGrid,
    sigma: f64,
    seed: u64,
) -> Result<ObservationSet> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "noise sd must be non-negative, got {sigma}"
        )));
    }
    let mut noisy = trajectory.clone();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = seeded(seed);
        // Row-major draw order: state by state, then time.
        for r in 0..noisy.nrows() {
            for c in 0..noisy.ncols() {
                noisy[(r, c)] += normal.sample(&mut rng);
            }
        }
    }
    ObservationSet::new(grid.clone(), noisy, None)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MleFit {
    pub params: Vec<f64>,
    pub x0: Vec<f64>,
    pub objective: f64,
    pub converged: bool,
    pub report: OptimizationReport,
}

/// Least squares over `(params, x0)` with RK4 inside the objective:
/// `Σ_j ‖y_j − x_j(t)‖² / (2σ_j²)`. Random starts cover the model
/// parameters; each start's `x0` begins at the first observation.
pub fn mle_fit(
    obs: &ObservationSet,
    model: &dyn ModelSpec,
    sigma2: &[f64],
    config: &OptimizerConfig,
    substeps: usize,
) -> Result<MleFit> {
    let m = model.n_equations();
    let k = model.n_params();
    if obs.n_states() != m {
        return Err(Error::Dimension(format!(
            "model has {m} equations, data have {} states",
            obs.n_states()
        )));
    }
    if sigma2.len() != m || sigma2.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidParameter(format!(
            "need {m} positive variances, got {sigma2:?}"
        )));
    }
    let y = obs.states();
    let objective = |p: &[f64]| -> f64 {
        match integrate_rk4(model, &p[..k], &p[k..], obs.grid(), substeps) {
            Ok(x) => {
                let mut total = 0.0;
                for j in 0..m {
                    let r = (y.row(j) - x.row(j)).norm_squared();
                    total += r / (2.0 * sigma2[j]);
                }
                if total.is_finite() {
                    total
                } else {
                    f64::INFINITY
                }
            }
            Err(_) => f64::INFINITY,
        }
    };

    let mut full = config.clone();
    let mut bx = config
        .start_box
        .clone()
        .unwrap_or_else(|| model.default_start_box());
    if bx.len() == k {
        bx.extend((0..m).map(|j| (y[(j, 0)], y[(j, 0)])));
    }
    full.start_box = Some(bx);
    let report = minimize(&objective, k + m, &full)?;
    Ok(MleFit {
        params: report.best[..k].to_vec(),
        x0: report.best[k..].to_vec(),
        objective: report.best_value,
        converged: report.converged,
        report,
    })
}
