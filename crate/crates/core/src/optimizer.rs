//! Multi-start nonlinear conjugate gradient (Polak–Ribière+) with numerical
//! gradients and a monotone Armijo line search.
//!
//! Objectives return `+inf` to reject a point (e.g. a singular operator);
//! the line search treats such points as failed trials and shrinks the step.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    /// Relative central-difference step; coordinate k uses `h * max(1, |p_k|)`.
    pub gradient_step: f64,
    /// Restart with steepest descent every this many iterations.
    /// `None` means `max(10, dim)`.
    pub restart_period: Option<usize>,
    pub armijo_c1: f64,
    pub max_backtracks: usize,
    pub starts: usize,
    /// Box for random starts; `None` means `[0, 1]` per coordinate.
    pub start_box: Option<Vec<(f64, f64)>>,
    /// Extra deterministic start points tried before the random ones.
    pub initial_points: Vec<Vec<f64>>,
    /// Stop when `‖g‖ <= gradient_tolerance * max(1, |f|)`.
    pub gradient_tolerance: f64,
    /// Stop after two consecutive iterations with relative decrease below this.
    pub objective_tolerance: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 500,
            gradient_step: 1e-6,
            restart_period: None,
            armijo_c1: 1e-4,
            max_backtracks: 40,
            starts: 10,
            start_box: None,
            initial_points: Vec::new(),
            gradient_tolerance: 1e-6,
            objective_tolerance: 1e-10,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("gradient_step", self.gradient_step),
            ("armijo_c1", self.armijo_c1),
            ("gradient_tolerance", self.gradient_tolerance),
            ("objective_tolerance", self.objective_tolerance),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.starts == 0 && self.initial_points.is_empty() {
            return Err(Error::InvalidParameter("need at least one start".into()));
        }
        if let Some(b) = &self.start_box {
            if b.iter()
                .any(|(lo, hi)| !(lo <= hi) || !lo.is_finite() || !hi.is_finite())
            {
                return Err(Error::InvalidParameter(format!("invalid start box {b:?}")));
            }
        }
        Ok(())
    }

    fn start_points(&self, dim: usize) -> Result<Vec<Vec<f64>>> {
        let default_box = vec![(0.0, 1.0); dim];
        let bx = self.start_box.as_ref().unwrap_or(&default_box);
        if bx.len() != dim {
            return Err(Error::Dimension(format!(
                "start box has {} entries for {dim} parameters",
                bx.len()
            )));
        }
        let mut points: Vec<Vec<f64>> = Vec::with_capacity(self.starts + self.initial_points.len());
        for p in &self.initial_points {
            if p.len() != dim {
                return Err(Error::Dimension(format!(
                    "initial point has {} entries for {dim} parameters",
                    p.len()
                )));
            }
            points.push(p.clone());
        }
        let mut rng = seeded(self.seed);
        for _ in 0..self.starts {
            points.push(
                bx.iter()
                    .map(|&(lo, hi)| {
                        if hi > lo {
                            rng.random_range(lo..hi)
                        } else {
                            lo
                        }
                    })
                    .collect(),
            );
        }
        Ok(points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartReport {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub iterations: usize,
    pub final_value: f64,
    pub gradient_norm: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationReport {
    pub best: Vec<f64>,
    pub best_value: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub starts: Vec<StartReport>,
}

fn sanitize(v: f64) -> f64 {
    if v.is_nan() {
        f64::INFINITY
    } else {
        v
    }
}

/// Central-difference gradient. Coordinates where the objective is infinite
/// on one side fall back to a one-sided difference.
pub fn numerical_gradient<F>(f: &F, p: &[f64], h: f64) -> Result<DVector<f64>>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let f0 = sanitize(f(p));
    let mut x = p.to_vec();
    let mut g = DVector::zeros(p.len());
    for k in 0..p.len() {
        let step = h * p[k].abs().max(1.0);
        x[k] = p[k] + step;
        let up = sanitize(f(&x));
        x[k] = p[k] - step;
        let down = sanitize(f(&x));
        x[k] = p[k];
        g[k] = match (up.is_finite(), down.is_finite()) {
            (true, true) => (up - down) / (2.0 * step),
            (true, false) if f0.is_finite() => (up - f0) / step,
            (false, true) if f0.is_finite() => (f0 - down) / step,
            _ => return Err(Error::GradientUnavailable { coordinate: k }),
        };
    }
    Ok(g)
}

/// An objective with an optional analytic or structured gradient. Closures
/// use central differences.
pub trait Objective: Sync {
    fn value(&self, p: &[f64]) -> f64;

    fn gradient(&self, p: &[f64], h: f64) -> Result<DVector<f64>> {
        numerical_gradient(&|q: &[f64]| self.value(q), p, h)
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    fn value(&self, p: &[f64]) -> f64 {
        self(p)
    }
}

/// Minimizes `f` over `R^dim` from every configured start; reports the best.
pub fn minimize<F>(f: &F, dim: usize, config: &OptimizerConfig) -> Result<OptimizationReport>
where
    F: Fn(&[f64]) -> f64 + Sync + ?Sized,
{
    struct Wrap<'a, F: ?Sized>(&'a F);
    impl<F> Objective for Wrap<'_, F>
    where
        F: Fn(&[f64]) -> f64 + Sync + ?Sized,
    {
        fn value(&self, p: &[f64]) -> f64 {
            (self.0)(p)
        }
    }
    minimize_objective(&Wrap(f), dim, config)
}

/// [`minimize`] for an [`Objective`], using its gradient.
pub fn minimize_objective<O>(
    objective: &O,
    dim: usize,
    config: &OptimizerConfig,
) -> Result<OptimizationReport>
where
    O: Objective + ?Sized,
{
    config.validate()?;
    let points = config.start_points(dim)?;
    let runs: Vec<Option<StartReport>> = points
        .into_par_iter()
        .map(|start| run_cg(objective, start, config))
        .collect();
    let starts: Vec<StartReport> = runs.into_iter().flatten().collect();
    let best = starts
        .iter()
        .filter(|s| s.final_value.is_finite())
        .min_by(|a, b| a.final_value.total_cmp(&b.final_value))
        .ok_or(Error::NoFeasibleStart)?;
    Ok(OptimizationReport {
        best: best.end.clone(),
        best_value: best.final_value,
        gradient_norm: best.gradient_norm,
        converged: best.converged,
        starts: starts.clone(),
    })
}

/// One CG run. `None` when the start itself is infeasible.
fn run_cg<O>(objective: &O, start: Vec<f64>, config: &OptimizerConfig) -> Option<StartReport>
where
    O: Objective + ?Sized,
{
    let f = |p: &[f64]| objective.value(p);
    let dim = start.len();
    let mut x = DVector::from_vec(start.clone());
    let mut fx = sanitize(f(x.as_slice()));
    if !fx.is_finite() {
        return None;
    }
    let restart = config.restart_period.unwrap_or(dim.max(10)).max(1);
    let grad = |x: &DVector<f64>| objective.gradient(x.as_slice(), config.gradient_step);

    let report =
        |x: &DVector<f64>, fx: f64, g: f64, iterations: usize, converged: bool| StartReport {
            start: start.clone(),
            end: x.as_slice().to_vec(),
            iterations,
            final_value: fx,
            gradient_norm: g,
            converged,
        };

    let Ok(mut g) = grad(&x) else {
        return Some(report(&x, fx, f64::NAN, 0, false));
    };
    let mut d = -&g;
    let mut prev_step: Option<(f64, f64)> = None; // (alpha, slope)
    let mut since_restart = 0usize;
    let mut stalls = 0usize;

    for iter in 0..config.max_iters {
        let gnorm = g.norm();
        if gnorm <= config.gradient_tolerance * fx.abs().max(1.0) {
            return Some(report(&x, fx, gnorm, iter, true));
        }

        let mut slope = g.dot(&d);
        if !(slope < 0.0) {
            d = -&g;
            slope = -gnorm * gnorm;
            since_restart = 0;
        }
        let alpha0 = match prev_step {
            Some((a, s)) if since_restart > 0 => (a * s / slope).clamp(1e-12, 1e12),
            _ => (1.0 / d.amax()).min(1.0),
        };

        let mut step = armijo(&f, &x, fx, &d, slope, alpha0, config);
        if step.is_none() && since_restart > 0 {
            // Conjugate direction failed; retry along steepest descent.
            d = -&g;
            slope = -gnorm * gnorm;
            since_restart = 0;
            step = armijo(&f, &x, fx, &d, slope, (1.0 / d.amax()).min(1.0), config);
        }
        let Some((alpha, x_new, f_new)) = step else {
            return Some(report(&x, fx, gnorm, iter, false));
        };

        let Ok(g_new) = grad(&x_new) else {
            return Some(report(&x_new, f_new, f64::NAN, iter + 1, false));
        };

        let decrease = fx - f_new;
        if decrease <= config.objective_tolerance * fx.abs().max(1.0) {
            stalls += 1;
        } else {
            stalls = 0;
        }

        since_restart += 1;
        let beta = if since_restart >= restart {
            since_restart = 0;
            0.0
        } else {
            (g_new.dot(&(&g_new - &g)) / g.dot(&g)).max(0.0)
        };
        prev_step = Some((alpha, slope));
        d = -&g_new + d * beta;
        x = x_new;
        fx = f_new;
        g = g_new;

        if stalls >= 2 {
            let gnorm = g.norm();
            let converged = gnorm <= config.gradient_tolerance * fx.abs().max(1.0);
            return Some(report(&x, fx, gnorm, iter + 1, converged));
        }
    }
    let gnorm = g.norm();
    let converged = gnorm <= config.gradient_tolerance * fx.abs().max(1.0);
    Some(report(&x, fx, gnorm, config.max_iters, converged))
}

/// Backtracking Armijo search along `d` with quadratic interpolation. When
/// the first trial already satisfies the condition the step is doubled while
/// the objective keeps decreasing; an accepted step is then refined by the
/// minimizer of a parabola through the last trials. Returns
/// `(alpha, x_new, f_new)` with `f_new < fx`.
fn armijo<F>(
    f: &F,
    x: &DVector<f64>,
    fx: f64,
    d: &DVector<f64>,
    slope: f64,
    alpha0: f64,
    config: &OptimizerConfig,
) -> Option<(f64, DVector<f64>, f64)>
where
    F: Fn(&[f64]) -> f64 + ?Sized,
{
    let eval = |alpha: f64| {
        let xn = x + d * alpha;
        let fv = sanitize(f(xn.as_slice()));
        (xn, fv)
    };
    let accepts =
        |alpha: f64, fv: f64| fv.is_finite() && fv <= fx + config.armijo_c1 * alpha * slope;
    // Minimizer of the parabola matching f(0), f'(0) and f(alpha).
    let tangent_min = |alpha: f64, fv: f64| {
        let curvature = fv - fx - slope * alpha;
        (curvature > 0.0).then(|| -slope * alpha * alpha / (2.0 * curvature))
    };

    let mut alpha = alpha0;
    let mut accepted = None;
    for attempt in 0..=config.max_backtracks {
        let (xn, fv) = eval(alpha);
        if accepts(alpha, fv) {
            accepted = Some((attempt, alpha, xn, fv));
            break;
        }
        alpha = match (fv.is_finite(), tangent_min(alpha, fv)) {
            (true, Some(a)) => a.clamp(0.1 * alpha, 0.5 * alpha),
            _ => 0.5 * alpha,
        };
    }
    let (attempt, alpha, xn, fv) = accepted?;
    if fv >= fx {
        return None;
    }
    let mut best = (alpha, xn, fv);

    let candidate = if attempt == 0 {
        // Expand; track the last three trial steps for a parabolic fit.
        let mut lower = (0.0, fx);
        let mut upper = None;
        for _ in 0..20 {
            let a = best.0 * 2.0;
            let (xe, fe) = eval(a);
            if fe.is_finite() && fe < best.2 && accepts(a, fe) {
                lower = (best.0, best.2);
                best = (a, xe, fe);
            } else {
                upper = Some((a, fe));
                break;
            }
        }
        match upper {
            Some((a2, f2)) if f2.is_finite() => {
                parabola_min((lower.0, lower.1), (best.0, best.2), (a2, f2))
            }
            Some(_) => None,
            None => None,
        }
    } else {
        tangent_min(best.0, best.2)
    };
    if let Some(a) =
        candidate.filter(|a| a.is_finite() && *a > 0.0 && (a / best.0 - 1.0).abs() > 0.05)
    {
        let (xq, fq) = eval(a);
        if fq.is_finite() && fq < best.2 && accepts(a, fq) {
            best = (a, xq, fq);
        }
    }
    Some(best)
}

/// Vertex of the parabola through three points with `a0 < a1 < a2`, if it is
/// a minimum inside the bracket.
fn parabola_min((a0, f0): (f64, f64), (a1, f1): (f64, f64), (a2, f2): (f64, f64)) -> Option<f64> {
    let d01 = (f1 - f0) / (a1 - a0);
    let d12 = (f2 - f1) / (a2 - a1);
    let curvature = (d12 - d01) / (a2 - a0);
    if !(curvature > 0.0) {
        return None;
    }
    let vertex = 0.5 * (a0 + a1) - d01 / (2.0 * curvature);
    (vertex > a0 && vertex < a2).then_some(vertex)
}

/// Result of optimizing independent parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub params: Vec<f64>,
    /// Sum of the block objectives.
    pub value: f64,
    pub converged: bool,
    pub blocks: Vec<(Vec<usize>, OptimizationReport)>,
}

/// Optimizes each parameter block on its own. `f(b, p)` must depend only on
/// the entries of `p` listed in `blocks[b]`; the remaining entries of `p` are
/// filler. Block `b` uses the seed derived from `(config.seed, b)` and the
/// matching slice of the start box and initial points.
pub fn minimize_blocks<F>(
    blocks: &[Vec<usize>],
    dim: usize,
    f: &F,
    config: &OptimizerConfig,
) -> Result<BlockReport>
where
    F: Fn(usize, &[f64]) -> f64 + Sync + ?Sized,
{
    config.validate()?;
    let mut params = vec![0.0; dim];
    let mut value = 0.0;
    let mut converged = true;
    let mut reports = Vec::with_capacity(blocks.len());
    for (b, idx) in blocks.iter().enumerate() {
        let mut sub = config.clone();
        if blocks.len() > 1 {
            sub.seed = derive_seed(config.seed, b as u64);
        }
        sub.start_box = config
            .start_box
            .as_ref()
            .map(|bx| idx.iter().map(|&i| bx[i]).collect());
        sub.initial_points = config
            .initial_points
            .iter()
            .map(|p| idx.iter().map(|&i| p[i]).collect())
            .collect();
        let embed = |q: &[f64]| {
            let mut full = vec![0.0; dim];
            for (k, &i) in idx.iter().enumerate() {
                full[i] = q[k];
            }
            full
        };
        let objective = |q: &[f64]| f(b, &embed(q));
        let report = minimize(&objective, idx.len(), &sub)?;
        for (k, &i) in idx.iter().enumerate() {
            params[i] = report.best[k];
        }
        value += report.best_value;
        converged &= report.converged;
        reports.push((idx.clone(), report));
    }
    Ok(BlockReport {
        params,
        value,
        converged,
        blocks: reports,
    })
}
