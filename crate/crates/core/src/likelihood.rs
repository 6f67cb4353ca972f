//! Profiled penalized likelihood and the quantities derived from it.
//!
//! For each equation the data are shifted by a particular solution,
//! `ỹ_j = y_j − P_j⁻¹ f_j`, and the kernel coefficients are maximized out in
//! closed form. The value minimized here is
//!
//! ```text
//! L(θ, β) = Σ_j  ỹ_jᵀ (ỹ_j − M_j⁻¹ ỹ_j) / (2σ_j²),   M_j = I + σ_j² λ P_jᵀP_j
//! ```
//!
//! which equals minus the penalized log-likelihood at the optimal states. The
//! Green's kernel `K = (PᵀP)⁻¹` is never formed. Since
//! `I − M⁻¹ = c Pᵀ(I + c PPᵀ)⁻¹P` with `c = σ²λ` and `P ỹ = P y − f`, each term
//! is evaluated as `(λ/2) rᵀ(I + c PPᵀ)⁻¹ r` with `r = P y − f`. This form is
//! non-negative by construction and never forms `P⁻¹f`, whose size blows up
//! as `P` nears singularity and would otherwise cancel catastrophically.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::models::{ForcingInputs, ModelSpec};
use crate::operators::{DifferenceOperator, KernelInverse, OperatorMatrix};
use crate::optimizer::Objective;

/// `ỹ = y − P⁻¹ f`.
pub fn transform_data(
    y: &DVector<f64>,
    op: &OperatorMatrix,
    forcing: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(y - op.solve(forcing)?)
}

/// Everything the profile objective needs besides the parameters.
pub struct ProfileContext<'a> {
    model: &'a dyn ModelSpec,
    obs: &'a ObservationSet,
    surrogate: DMatrix<f64>,
    lambda: f64,
    sigma2: Vec<f64>,
    diff: DifferenceOperator,
    /// Equations each parameter enters.
    users: Vec<Vec<usize>>,
}

/// Per-equation pieces of an evaluation.
#[derive(Debug, Clone)]
pub struct EquationTerms {
    pub operator: OperatorMatrix,
    pub forcing: DVector<f64>,
    /// `r = P y − f`, which equals `P ỹ`.
    pub residual: DVector<f64>,
    /// `s = (I + σ²λ PPᵀ)⁻¹ r`.
    pub scaled: DVector<f64>,
    pub value: f64,
}

impl<'a> ProfileContext<'a> {
    pub fn new(
        model: &'a dyn ModelSpec,
        obs: &'a ObservationSet,
        surrogate: DMatrix<f64>,
        lambda: f64,
        sigma2: Vec<f64>,
        diff: DifferenceOperator,
    ) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lambda must be positive, got {lambda}"
            )));
        }
        let m = model.n_equations();
        if obs.n_states() != m {
            return Err(Error::Dimension(format!(
                "model `{}` has {m} equations but the data have {} states",
                model.name(),
                obs.n_states()
            )));
        }
        if sigma2.len() != m || sigma2.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need {m} positive noise variances, got {sigma2:?}"
            )));
        }
        if surrogate.nrows() != m || surrogate.ncols() != obs.n_times() {
            return Err(Error::Dimension(format!(
                "surrogate is {}x{}, expected {m}x{}",
                surrogate.nrows(),
                surrogate.ncols(),
                obs.n_times()
            )));
        }
        if diff.dim() != obs.n_times() {
            return Err(Error::Dimension(
                "difference operator does not match the grid".into(),
            ));
        }
        let mut users = vec![Vec::new(); model.n_params()];
        for (j, deps) in model.dependencies().iter().enumerate() {
            for &k in deps {
                users[k].push(j);
            }
        }
        Ok(Self {
            model,
            obs,
            surrogate,
            lambda,
            sigma2,
            diff,
            users,
        })
    }

    pub fn model(&self) -> &dyn ModelSpec {
        self.model
    }

    pub fn observations(&self) -> &ObservationSet {
        self.obs
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn difference_operator(&self) -> &DifferenceOperator {
        &self.diff
    }

    pub fn surrogate(&self) -> &DMatrix<f64> {
        &self.surrogate
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<ProfileContext<'a>> {
        ProfileContext::new(
            self.model,
            self.obs,
            self.surrogate.clone(),
            lambda,
            self.sigma2.clone(),
            self.diff.clone(),
        )
    }

    fn forcing_inputs(&self) -> ForcingInputs<'_> {
        ForcingInputs {
            times: self.obs.grid().times(),
            surrogate: &self.surrogate,
            inputs: self.obs.inputs(),
        }
    }

    pub fn forcing(&self, params: &[f64]) -> Result<Vec<DVector<f64>>> {
        self.check_params(params)?;
        self.model.forcing_all(params, &self.forcing_inputs())
    }

    fn check_params(&self, params: &[f64]) -> Result<()> {
        if params.len() != self.model.n_params() {
            return Err(Error::Dimension(format!(
                "model `{}` takes {} parameters, got {}",
                self.model.name(),
                self.model.n_params(),
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite parameters {params:?}"
            )));
        }
        Ok(())
    }

    pub fn operator(&self, params: &[f64], equation: usize) -> Result<OperatorMatrix> {
        OperatorMatrix::new(
            &self.model.operator_coefficients(params, equation),
            &self.diff,
        )
    }

    /// Full evaluation of one equation given its forcing.
    pub fn equation_terms(
        &self,
        params: &[f64],
        equation: usize,
        forcing: DVector<f64>,
    ) -> Result<EquationTerms> {
        let factor = self.factor(params, equation)?;
        let residual = &factor.applied - &forcing;
        let scaled = factor.chol.solve(&residual);
        let value = 0.5 * self.lambda * residual.dot(&scaled);
        Ok(EquationTerms {
            operator: factor.operator,
            forcing,
            residual,
            scaled,
            value,
        })
    }

    /// Operator, `P y` and the Cholesky factor of `I + σ²λ PPᵀ`.
    fn factor(&self, params: &[f64], equation: usize) -> Result<Factor> {
        let operator = self.operator(params, equation)?;
        let applied = operator.apply(&self.obs.state(equation));
        let c = self.sigma2[equation] * self.lambda;
        let p = operator.matrix();
        let mut outer = p * p.transpose();
        outer = (&outer + outer.transpose()) * (0.5 * c);
        for i in 0..outer.nrows() {
            outer[(i, i)] += 1.0;
        }
        let chol = outer.cholesky().ok_or_else(|| Error::SingularOperator {
            theta: operator.theta().to_vec(),
            condition: f64::INFINITY,
        })?;
        Ok(Factor {
            theta: operator.theta().to_vec(),
            operator,
            applied,
            chol,
        })
    }

    fn factored_value(&self, factor: &Factor, forcing: &DVector<f64>) -> f64 {
        let residual = &factor.applied - forcing;
        0.5 * self.lambda * residual.dot(&factor.chol.solve(&residual))
    }

    /// Central-difference gradient of the objective over `equations` that
    /// exploits the model's dependency map: a coordinate is only charged for
    /// the equations it enters, and equations whose operator a coordinate
    /// leaves unchanged reuse their factorization. Agrees with
    /// [`crate::optimizer::numerical_gradient`] of [`Self::soft_objective`] up to round-off,
    /// including the one-sided fallback.
    pub fn gradient_for(
        &self,
        params: &[f64],
        equations: &[usize],
        h: f64,
    ) -> Result<DVector<f64>> {
        self.check_params(params)?;
        let inputs = self.forcing_inputs();
        let dim = params.len();
        let base_forcing = self.model.forcing_all(params, &inputs).ok();
        let mut base: Vec<Option<(Factor, f64)>> =
            (0..self.model.n_equations()).map(|_| None).collect();
        let mut base_finite = base_forcing.is_some();
        if let Some(forcing) = &base_forcing {
            for &j in equations {
                match self.factor(params, j) {
                    Ok(factor) => {
                        let v = self.factored_value(&factor, &forcing[j]);
                        base_finite &= v.is_finite();
                        base[j] = Some((factor, v));
                    }
                    Err(e) if is_soft(&e) => base_finite = false,
                    Err(e) => return Err(e),
                }
            }
        }

        // Change of the objective when coordinate k moves to `value`; `None`
        // when the moved point is rejected.
        let mut x = params.to_vec();
        let mut shift = |k: usize, value: f64| -> Result<Option<f64>> {
            x[k] = value;
            let out = (|| {
                let forcing = match self.model.forcing_all(&x, &inputs) {
                    Ok(f) => f,
                    Err(e) if is_soft(&e) => return Ok(None),
                    Err(e) => return Err(e),
                };
                let mut delta = 0.0;
                for &j in &self.users[k] {
                    if !equations.contains(&j) {
                        continue;
                    }
                    let Some((factor, v0)) = &base[j] else {
                        return Ok(None);
                    };
                    let theta = self.model.operator_coefficients(&x, j);
                    let v = if theta == factor.theta {
                        self.factored_value(factor, &forcing[j])
                    } else {
                        match self.factor(&x, j) {
                            Ok(moved) => self.factored_value(&moved, &forcing[j]),
                            Err(e) if is_soft(&e) => return Ok(None),
                            Err(e) => return Err(e),
                        }
                    };
                    if !v.is_finite() {
                        return Ok(None);
                    }
                    delta += v - v0;
                }
                Ok(Some(delta))
            })();
            x[k] = params[k];
            out
        };

        let mut g = DVector::zeros(dim);
        for k in 0..dim {
            if !self.users[k].iter().any(|j| equations.contains(j)) {
                continue;
            }
            let step = h * params[k].abs().max(1.0);
            let up = shift(k, params[k] + step)?;
            let down = shift(k, params[k] - step)?;
            g[k] = match (up, down, base_finite) {
                (Some(u), Some(d), true) => (u - d) / (2.0 * step),
                (Some(u), None, true) => u / step,
                (None, Some(d), true) => -d / step,
                _ => return Err(Error::GradientUnavailable { coordinate: k }),
            };
        }
        Ok(g)
    }

    /// Objective restricted to `equations`. Singular operators and guarded
    /// divisions evaluate to `+inf`; non-finite parameters are an error.
    pub fn objective_for(&self, params: &[f64], equations: &[usize]) -> Result<f64> {
        self.check_params(params)?;
        let forcing = match self.model.forcing_all(params, &self.forcing_inputs()) {
            Ok(f) => f,
            Err(e) if is_soft(&e) => return Ok(f64::INFINITY),
            Err(e) => return Err(e),
        };
        let mut total = 0.0;
        for &j in equations {
            match self.equation_terms(params, j, forcing[j].clone()) {
                Ok(t) => total += t.value,
                Err(e) if is_soft(&e) => return Ok(f64::INFINITY),
                Err(e) => return Err(e),
            }
        }
        Ok(total)
    }

    pub fn objective(&self, params: &[f64]) -> Result<f64> {
        let all: Vec<usize> = (0..self.model.n_equations()).collect();
        self.objective_for(params, &all)
    }

    /// Objective for the optimizer: every failure maps to `+inf`.
    pub fn soft_objective(&self, params: &[f64], equations: &[usize]) -> f64 {
        match self.objective_for(params, equations) {
            Ok(v) if v.is_finite() => v,
            _ => f64::INFINITY,
        }
    }

    /// `(α̂_j, x̂_j)` per equation.
    pub fn reconstruct_states(&self, params: &[f64]) -> Result<Vec<Reconstruction>> {
        let forcing = self.forcing(params)?;
        forcing
            .into_iter()
            .enumerate()
            .map(|(j, f)| {
                let terms = self.equation_terms(params, j, f)?;
                let c = self.sigma2[j] * self.lambda;
                Ok(Reconstruction::from_terms(&terms, &self.obs.state(j), c))
            })
            .collect()
    }

    /// Effective degrees of freedom per equation.
    pub fn effective_df(&self, params: &[f64]) -> Result<Vec<f64>> {
        (0..self.model.n_equations())
            .map(|j| {
                let op = self.operator(params, j)?;
                Ok(effective_df(
                    &op.kernel_inverse(),
                    self.lambda,
                    self.sigma2[j],
                ))
            })
            .collect()
    }

    /// `AIC = 2 L + 2 Σ df_j`, with `L` the minimized objective.
    pub fn aic(&self, params: &[f64]) -> Result<f64> {
        let value = self.objective(params)?;
        let df = self.effective_df(params)?;
        Ok(aic(value, &df))
    }
}

struct Factor {
    theta: Vec<f64>,
    operator: OperatorMatrix,
    applied: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

/// The profile objective over a subset of equations as an optimizer
/// [`Objective`], with the structured gradient.
pub struct ProfileObjective<'c, 'a> {
    pub context: &'c ProfileContext<'a>,
    pub equations: Vec<usize>,
}

impl Objective for ProfileObjective<'_, '_> {
    fn value(&self, p: &[f64]) -> f64 {
        self.context.soft_objective(p, &self.equations)
    }

    fn gradient(&self, p: &[f64], h: f64) -> Result<DVector<f64>> {
        self.context.gradient_for(p, &self.equations, h)
    }
}

fn is_soft(e: &Error) -> bool {
    matches!(
        e,
        Error::SingularOperator { .. } | Error::DivisionGuard { .. }
    )
}

/// Reconstructed states of one equation.
///
/// With `s = (I + σ²λ PPᵀ)⁻¹(P y − f)` the kernel weights are `α̂ = Pᵀs` and
/// the states `x̂ = y − σ²λ Pᵀs`. These equal `PᵀP w` and `w + P⁻¹f` for
/// `w = (I + σ²λ PᵀP)⁻¹ ỹ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub alpha: DVector<f64>,
    pub states: DVector<f64>,
}

impl Reconstruction {
    fn from_terms(terms: &EquationTerms, y: &DVector<f64>, c: f64) -> Self {
        let alpha = terms.operator.matrix().tr_mul(&terms.scaled);
        Self {
            states: y - &alpha * c,
            alpha,
        }
    }
}

/// `Tr[(I + λσ² PᵀP)⁻¹]`, which equals `Tr[K (K + λσ² I)⁻¹]`.
pub fn effective_df(gram: &KernelInverse, lambda: f64, sigma2: f64) -> f64 {
    let shifted = gram.shifted(lambda * sigma2);
    match shifted.cholesky() {
        Some(chol) => chol.inverse().trace(),
        None => f64::NAN,
    }
}

pub fn aic(objective: f64, df: &[f64]) -> f64 {
    2.0 * objective + 2.0 * df.iter().sum::<f64>()
}

/// Hessian by central differences of the numerical gradient with steps
/// `h_k = max(1e-4, 1e-4 |p_k|)`, symmetrized.
pub fn hessian<O>(f: &O, p: &[f64], gradient_step: f64) -> Result<DMatrix<f64>>
where
    O: Objective + ?Sized,
{
    let dim = p.len();
    let mut h = DMatrix::zeros(dim, dim);
    let mut x = p.to_vec();
    for k in 0..dim {
        let step = (1e-4 * p[k].abs()).max(1e-4);
        x[k] = p[k] + step;
        let up = f.gradient(&x, gradient_step)?;
        x[k] = p[k] - step;
        let down = f.gradient(&x, gradient_step)?;
        x[k] = p[k];
        h.set_column(k, &((up - down) / (2.0 * step)));
    }
    Ok((&h + h.transpose()) * 0.5)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaldInterval {
    pub estimate: f64,
    /// `None` when the covariance diagonal is negative for this parameter.
    pub stderr: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaldTable {
    pub level: f64,
    pub covariance: DMatrix<f64>,
    pub intervals: Vec<WaldInterval>,
}

/// Wald intervals from the Hessian of the log-likelihood: `Σ = −H⁻¹`.
pub fn wald_intervals(
    loglik_hessian: &DMatrix<f64>,
    estimates: &[f64],
    level: f64,
) -> Result<WaldTable> {
    let dim = estimates.len();
    if loglik_hessian.nrows() != dim || loglik_hessian.ncols() != dim {
        return Err(Error::Dimension(format!(
            "Hessian is {}x{} for {dim} estimates",
            loglik_hessian.nrows(),
            loglik_hessian.ncols()
        )));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "confidence level {level} not in (0, 1)"
        )));
    }
    if loglik_hessian.iter().any(|v| !v.is_finite()) {
        return Err(Error::CovarianceUnavailable {
            null_directions: Vec::new(),
        });
    }
    let info = -loglik_hessian;
    let sym = (&info + info.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let null_directions: Vec<Vec<f64>> = eig
        .eigenvalues
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() <= 1e-10 * scale)
        .map(|(i, _)| eig.eigenvectors.column(i).iter().copied().collect())
        .collect();
    if !null_directions.is_empty() {
        return Err(Error::CovarianceUnavailable { null_directions });
    }
    let mut inv_values = eig.eigenvalues.clone();
    inv_values.apply(|v| *v = 1.0 / *v);
    let covariance =
        &eig.eigenvectors * DMatrix::from_diagonal(&inv_values) * eig.eigenvectors.transpose();
    let covariance = (&covariance + covariance.transpose()) * 0.5;

    let z = Normal::standard().inverse_cdf(0.5 + level / 2.0);
    let intervals = estimates
        .iter()
        .enumerate()
        .map(|(k, &estimate)| {
            let var = covariance[(k, k)];
            if var >= 0.0 && var.is_finite() {
                let se = var.sqrt();
                WaldInterval {
                    estimate,
                    stderr: Some(se),
                    lower: Some(estimate - z * se),
                    upper: Some(estimate + z * se),
                }
            } else {
                WaldInterval {
                    estimate,
                    stderr: None,
                    lower: None,
                    upper: None,
                }
            }
        })
        .collect();
    Ok(WaldTable {
        level,
        covariance,
        intervals,
    })
}
