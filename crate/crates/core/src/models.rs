//! Model specifications: operator layout, forcing terms and parameter maps.
//!
//! Every equation is written `P_θj x_j = f_j(x̂', u, β)` where `P_θj` is a
//! polynomial in the difference operator and `f_j` sees the states only
//! through the fixed spline surrogate `x̂'`. First-order models keep the
//! derivative coefficient fixed at 1 so that only the zeroth-order slot is
//! estimated.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::smoother::SplineBasis;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Enters the linear operator.
    Theta,
    /// Enters the forcing term.
    Beta,
    /// Latent-input spline coefficient (part of β).
    Latent,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub role: ParamRole,
}

impl ParamInfo {
    fn new(name: impl Into<String>, role: ParamRole) -> Self {
        Self {
            name: name.into(),
            role,
        }
    }
}

/// What a forcing term may look at: the grid, the surrogate states evaluated
/// on it (m × n), and the exogenous inputs (p × n) if any.
#[derive(Debug, Clone, Copy)]
pub struct ForcingInputs<'a> {
    pub times: &'a [f64],
    pub surrogate: &'a DMatrix<f64>,
    pub inputs: Option<&'a DMatrix<f64>>,
}

pub trait ModelSpec: Send + Sync {
    fn name(&self) -> &str;

    fn n_equations(&self) -> usize;

    /// Flat layout of the free parameters.
    fn params(&self) -> Vec<ParamInfo>;

    fn n_params(&self) -> usize {
        self.params().len()
    }

    /// Operator coefficients `θ_j` (constant term first) for `equation`.
    fn operator_coefficients(&self, params: &[f64], equation: usize) -> Vec<f64>;

    /// Forcing `f_j` on the grid.
    fn forcing(
        &self,
        params: &[f64],
        equation: usize,
        inputs: &ForcingInputs<'_>,
    ) -> Result<DVector<f64>>;

    /// Forcing for all equations at once. Override when equations share work.
    fn forcing_all(&self, params: &[f64], inputs: &ForcingInputs<'_>) -> Result<Vec<DVector<f64>>> {
        (0..self.n_equations())
            .map(|j| self.forcing(params, j, inputs))
            .collect()
    }

    /// Parameter indices each equation depends on (operator and forcing).
    fn dependencies(&self) -> Vec<Vec<usize>>;

    /// Box from which multi-start points are drawn.
    fn default_start_box(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.n_params()]
    }

    /// The continuous vector field `dx/dt`, used for simulation and the
    /// solver-based baseline.
    fn vector_field(&self, params: &[f64], t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let _ = (params, t, x, dx);
        Err(Error::NoVectorField(self.name().to_string()))
    }

    /// Latent input evaluated on `times`, when the model has one.
    fn latent_profile(&self, params: &[f64], times: &[f64]) -> Option<Result<DVector<f64>>> {
        let _ = (params, times);
        None
    }

    /// Whether noise variance should be pooled across equations by default.
    fn shared_variance(&self) -> bool {
        false
    }
}

/// `dx/dt - θ x = 0`, solution `x(0) e^{θ t}`.
#[derive(Debug, Clone, Default)]
pub struct ExponentialDecay;

impl ModelSpec for ExponentialDecay {
    fn name(&self) -> &str {
        "exponential"
    }

    fn n_equations(&self) -> usize {
        1
    }

    fn params(&self) -> Vec<ParamInfo> {
        vec![ParamInfo::new("theta", ParamRole::Theta)]
    }

    fn operator_coefficients(&self, params: &[f64], _equation: usize) -> Vec<f64> {
        vec![-params[0], 1.0]
    }

    fn forcing(
        &self,
        _params: &[f64],
        _equation: usize,
        inputs: &ForcingInputs<'_>,
    ) -> Result<DVector<f64>> {
        Ok(DVector::zeros(inputs.times.len()))
    }

    fn dependencies(&self) -> Vec<Vec<usize>> {
        vec![vec![0]]
    }

    fn default_start_box(&self) -> Vec<(f64, f64)> {
        vec![(-4.0, 0.0)]
    }

    fn vector_field(&self, params: &[f64], _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        dx[0] = params[0] * x[0];
        Ok(())
    }
}

/// Predator–prey system
/// `dx₁/dt = x₁(θ₁ − β₁x₂)`, `dx₂/dt = −x₂(θ₂ − β₂x₁)`.
///
/// Parameter order is `(θ₁, β₁, θ₂, β₂)`.
#[derive(Debug, Clone, Default)]
pub struct LotkaVolterra;

impl ModelSpec for LotkaVolterra {
    fn name(&self) -> &str {
        "lotka-volterra"
    }

    fn n_equations(&self) -> usize {
        2
    }

    fn params(&self) -> Vec<ParamInfo> {
        vec![
            ParamInfo::new("theta1", ParamRole::Theta),
            ParamInfo::new("beta1", ParamRole::Beta),
            ParamInfo::new("theta2", ParamRole::Theta),
            ParamInfo::new("beta2", ParamRole::Beta),
        ]
    }

    fn operator_coefficients(&self, params: &[f64], equation: usize) -> Vec<f64> {
        match equation {
            0 => vec![-params[0], 1.0],
            _ => vec![params[2], 1.0],
        }
    }

    fn forcing(
        &self,
        params: &[f64],
        equation: usize,
        inputs: &ForcingInputs<'_>,
    ) -> Result<DVector<f64>> {
        let s = inputs.surrogate;
        let n = inputs.times.len();
        let coef = match equation {
            0 => -params[1],
            _ => params[3],
        };
        Ok(DVector::from_fn(n, |i, _| coef * s[(0, i)] * s[(1, i)]))
    }

    fn dependencies(&self) -> Vec<Vec<usize>> {
        vec![vec![0, 1], vec![2, 3]]
    }

    fn vector_field(&self, p: &[f64], _t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        dx[0] = x[0] * (p[0] - p[1] * x[1]);
        dx[1] = -x[1] * (p[2] - p[3] * x[0]);
        Ok(())
    }
}

/// Latent driving input `η(t) = Σ a_k φ_k(t)` on a cubic B-spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentInput {
    basis: SplineBasis,
}

impl LatentInput {
    pub const DEFAULT_BASIS: usize = 15;

    pub fn new(basis: SplineBasis) -> Self {
        Self { basis }
    }

    /// Cubic basis with `n_basis` functions and equally spaced knots.
    pub fn uniform(lo: f64, hi: f64, n_basis: usize) -> Result<Self> {
        Ok(Self::new(SplineBasis::uniform(3, lo, hi, n_basis)?))
    }

    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn n_coefficients(&self) -> usize {
        self.basis.n_basis()
    }

    pub fn eval(&self, coefficients: &[f64], times: &[f64]) -> Result<DVector<f64>> {
        let phi = self.basis.design(times)?;
        Ok(phi * DVector::from_column_slice(coefficients))
    }

    pub fn eval_at(&self, coefficients: &[f64], t: f64) -> Result<f64> {
        let row = self.basis.eval(t)?;
        Ok(row.iter().zip(coefficients).map(|(a, b)| a * b).sum())
    }
}

/// Min–max normalization to `[0, 1]`. A flat profile maps to zeros.
pub fn normalize_unit(values: &DVector<f64>) -> DVector<f64> {
    let lo = values.min();
    let hi = values.max();
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        return DVector::zeros(values.len());
    }
    values.map(|v| (v - lo) / (hi - lo))
}

/// Genes driven by one latent activator:
/// `dx_j/dt + θ_j x_j = β₁ⱼ + β₂ⱼ η / (β₃ⱼ + η)`.
///
/// Per gene the parameters are `(θ_j, β₁ⱼ, β₂ⱼ, β₃ⱼ)`; the latent spline
/// coefficients follow after all genes and couple every equation.
#[derive(Debug, Clone)]
pub struct TfNetwork {
    genes: usize,
    latent: LatentInput,
    shared_variance: bool,
    division_guard: f64,
}

impl TfNetwork {
    pub const PER_GENE: usize = 4;

    pub fn new(genes: usize, latent: LatentInput, shared_variance: bool) -> Result<Self> {
        if genes == 0 {
            return Err(Error::InvalidParameter(
                "tf-network needs at least one gene".into(),
            ));
        }
        Ok(Self {
            genes,
            latent,
            shared_variance,
            division_guard: 1e-8,
        })
    }

    pub fn with_division_guard(mut self, eps: f64) -> Self {
        self.division_guard = eps;
        self
    }

    pub fn genes(&self) -> usize {
        self.genes
    }

    pub fn latent(&self) -> &LatentInput {
        &self.latent
    }

    pub fn latent_offset(&self) -> usize {
        self.genes * Self::PER_GENE
    }

    fn latent_coefficients<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.latent_offset()..]
    }

    fn saturation(&self, params: &[f64], gene: usize, eta: f64, time: f64) -> Result<f64> {
        let base = gene * Self::PER_GENE;
        let (b1, b2, b3) = (params[base + 1], params[base + 2], params[base + 3]);
        let denom = b3 + eta;
        if denom <= self.division_guard {
            return Err(Error::DivisionGuard {
                equation: gene,
                time,
                value: denom,
            });
        }
        Ok(b1 + b2 * eta / denom)
    }

    fn forcing_from_eta(
        &self,
        params: &[f64],
        gene: usize,
        times: &[f64],
        eta: &DVector<f64>,
    ) -> Result<DVector<f64>> {
        let mut f = DVector::zeros(times.len());
        for (i, &t) in times.iter().enumerate() {
            f[i] = self.saturation(params, gene, eta[i], t)?;
        }
        Ok(f)
    }
}

impl ModelSpec for TfNetwork {
    fn name(&self) -> &str {
        "tf-network"
    }

    fn n_equations(&self) -> usize {
        self.genes
    }

    fn params(&self) -> Vec<ParamInfo> {
        let mut out = Vec::with_capacity(self.latent_offset() + self.latent.n_coefficients());
        for g in 1..=self.genes {
            out.push(ParamInfo::new(format!("theta_{g}"), ParamRole::Theta));
            out.push(ParamInfo::new(format!("beta1_{g}"), ParamRole::Beta));
            out.push(ParamInfo::new(format!("beta2_{g}"), ParamRole::Beta));
            out.push(ParamInfo::new(format!("beta3_{g}"), ParamRole::Beta));
        }
        for k in 1..=self.latent.n_coefficients() {
            out.push(ParamInfo::new(format!("a_{k}"), ParamRole::Latent));
        }
        out
    }

    fn operator_coefficients(&self, params: &[f64], equation: usize) -> Vec<f64> {
        vec![params[equation * Self::PER_GENE], 1.0]
    }

    fn forcing(
        &self,
        params: &[f64],
        equation: usize,
        inputs: &ForcingInputs<'_>,
    ) -> Result<DVector<f64>> {
        let eta = self
            .latent
            .eval(self.latent_coefficients(params), inputs.times)?;
        self.forcing_from_eta(params, equation, inputs.times, &eta)
    }

    fn forcing_all(&self, params: &[f64], inputs: &ForcingInputs<'_>) -> Result<Vec<DVector<f64>>> {
        let eta = self
            .latent
            .eval(self.latent_coefficients(params), inputs.times)?;
        (0..self.genes)
            .map(|g| self.forcing_from_eta(params, g, inputs.times, &eta))
            .collect()
    }

    fn dependencies(&self) -> Vec<Vec<usize>> {
        let latent: Vec<usize> =
            (self.latent_offset()..self.latent_offset() + self.latent.n_coefficients()).collect();
        (0..self.genes)
            .map(|g| {
                let base = g * Self::PER_GENE;
                let mut deps: Vec<usize> = (base..base + Self::PER_GENE).collect();
                deps.extend_from_slice(&latent);
                deps
            })
            .collect()
    }

    fn vector_field(&self, params: &[f64], t: f64, x: &[f64], dx: &mut [f64]) -> Result<()> {
        let eta = self.latent.eval_at(self.latent_coefficients(params), t)?;
        for g in 0..self.genes {
            let theta = params[g * Self::PER_GENE];
            dx[g] = -theta * x[g] + self.saturation(params, g, eta, t)?;
        }
        Ok(())
    }

    fn latent_profile(&self, params: &[f64], times: &[f64]) -> Option<Result<DVector<f64>>> {
        Some(self.latent.eval(self.latent_coefficients(params), times))
    }

    fn shared_variance(&self) -> bool {
        self.shared_variance
    }
}

pub fn model_exponential() -> ExponentialDecay {
    ExponentialDecay
}

pub fn model_lotka_volterra() -> LotkaVolterra {
    LotkaVolterra
}

/// TF network whose 15-function latent basis spans `[t_first, t_last]`.
pub fn model_tf_network(
    genes: usize,
    shared_variance: bool,
    span: (f64, f64),
) -> Result<TfNetwork> {
    let latent = LatentInput::uniform(span.0, span.1, LatentInput::DEFAULT_BASIS)?;
    TfNetwork::new(genes, latent, shared_variance)
}

/// Built-in model lookup. `span` and `genes` are only used by `tf-network`.
pub fn model_by_name(name: &str, genes: usize, span: (f64, f64)) -> Result<Box<dyn ModelSpec>> {
    match name {
        "exponential" => Ok(Box::new(ExponentialDecay)),
        "lotka-volterra" => Ok(Box::new(LotkaVolterra)),
        "tf-network" => Ok(Box::new(model_tf_network(genes, true, span)?)),
        other => Err(Error::InvalidParameter(format!(
            "unknown model `{other}` (expected exponential, lotka-volterra or tf-network)"
        ))),
    }
}

/// Connected components of equations that share parameters. Each block lists
/// its equations and the union of their parameters, both sorted.
pub fn parameter_blocks(model: &dyn ModelSpec) -> Vec<(Vec<usize>, Vec<usize>)> {
    let deps = model.dependencies();
    let m = deps.len();
    let mut parent: Vec<usize> = (0..m).collect();
    fn root(parent: &mut [usize], mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    let mut owner: std::collections::BTreeMap<usize, usize> = Default::default();
    for (j, params) in deps.iter().enumerate() {
        for &p in params {
            if let Some(&other) = owner.get(&p) {
                let (a, b) = (root(&mut parent, j), root(&mut parent, other));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            } else {
                owner.insert(p, j);
            }
        }
    }
    let mut blocks: std::collections::BTreeMap<usize, (Vec<usize>, Vec<usize>)> =
        Default::default();
    for j in 0..m {
        let r = root(&mut parent, j);
        let entry = blocks.entry(r).or_default();
        entry.0.push(j);
        entry.1.extend_from_slice(&deps[j]);
    }
    blocks
        .into_values()
        .map(|(eqs, mut params)| {
            params.sort_unstable();
            params.dedup();
            (eqs, params)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn inputs<'a>(times: &'a [f64], s: &'a DMatrix<f64>) -> ForcingInputs<'a> {
        ForcingInputs {
            times,
            surrogate: s,
            inputs: None,
        }
    }

    #[test]
    fn exponential_layout() {
        let m = model_exponential();
        assert_eq!(m.operator_coefficients(&[-2.0], 0), vec![2.0, 1.0]);
        let t = [0.0, 1.0, 2.0];
        let s = DMatrix::from_element(1, 3, 5.0);
        assert_eq!(
            m.forcing(&[3.0], 0, &inputs(&t, &s)).unwrap(),
            DVector::zeros(3)
        );
        let mut dx = [0.0];
        m.vector_field(&[-2.0], 0.0, &[-1.0], &mut dx).unwrap();
        assert_eq!(dx[0], 2.0);
    }

    #[test]
    fn lotka_volterra_decouples_without_interaction() {
        let m = model_lotka_volterra();
        let t = [0.0, 1.0, 2.0];
        let s = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 0.5, 0.5, 4.0]);
        for j in 0..2 {
            let f = m
                .forcing(&[0.2, 0.0, 0.7, 0.0], j, &inputs(&t, &s))
                .unwrap();
            assert!(f.iter().all(|&v| v == 0.0));
        }
        let f1 = m
            .forcing(&[0.2, 0.35, 0.7, 0.4], 0, &inputs(&t, &s))
            .unwrap();
        assert_relative_eq!(f1[2], -0.35 * 3.0 * 4.0);
        let f2 = m
            .forcing(&[0.2, 0.35, 0.7, 0.4], 1, &inputs(&t, &s))
            .unwrap();
        assert_relative_eq!(f2[0], 0.4 * 0.5);
        assert_eq!(
            m.operator_coefficients(&[0.2, 0.35, 0.7, 0.4], 1),
            vec![0.7, 1.0]
        );
    }

    #[test]
    fn dependency_map_is_sound_under_perturbation() {
        let grid = [16.0, 18.0, 20.0, 21.0, 22.0, 23.0, 24.0, 25.0, 39.0, 67.0];
        let tf = model_tf_network(3, true, (16.0, 67.0)).unwrap();
        let lv = model_lotka_volterra();
        let s_tf = DMatrix::from_element(3, grid.len(), 1.0);
        let s_lv = DMatrix::from_element(2, grid.len(), 1.5);
        let models: [(&dyn ModelSpec, &DMatrix<f64>); 2] = [(&tf, &s_tf), (&lv, &s_lv)];
        for (model, s) in models {
            let base: Vec<f64> = (0..model.n_params())
                .map(|i| 0.3 + 0.01 * i as f64)
                .collect();
            let deps = model.dependencies();
            for (j, dep) in deps.iter().enumerate() {
                let f0 = model.forcing(&base, j, &inputs(&grid, s)).unwrap();
                let th0 = model.operator_coefficients(&base, j);
                for p in 0..model.n_params() {
                    if dep.contains(&p) {
                        continue;
                    }
                    let mut q = base.clone();
                    q[p] += 0.5;
                    assert_eq!(model.forcing(&q, j, &inputs(&grid, s)).unwrap(), f0);
                    assert_eq!(model.operator_coefficients(&q, j), th0);
                }
            }
        }
    }

    #[test]
    fn tf_limits() {
        let tf = model_tf_network(2, true, (0.0, 10.0)).unwrap();
        let t = [0.0, 5.0, 10.0];
        let s = DMatrix::zeros(2, 3);
        let mut p = vec![0.5, 0.3, 1.2, 0.8, 0.5, 0.1, 2.0, 0.4];
        p.extend(std::iter::repeat_n(0.0, 15));
        let f = tf.forcing(&p, 0, &inputs(&t, &s)).unwrap();
        assert!(f.iter().all(|&v| (v - 0.3).abs() < 1e-15));

        let big = 1e9;
        let mut q = p.clone();
        for a in q.iter_mut().skip(8) {
            *a = big;
        }
        let f = tf.forcing(&q, 1, &inputs(&t, &s)).unwrap();
        for v in f.iter() {
            assert_relative_eq!(*v, 0.1 + 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn tf_division_guard() {
        let tf = model_tf_network(1, true, (0.0, 10.0)).unwrap();
        let t = [0.0, 5.0, 10.0];
        let s = DMatrix::zeros(1, 3);
        let mut p = vec![0.5, 0.3, 1.2, -1.0];
        p.extend(std::iter::repeat_n(0.5, 15));
        assert!(matches!(
            tf.forcing(&p, 0, &inputs(&t, &s)),
            Err(Error::DivisionGuard { .. })
        ));
    }

    #[test]
    fn tf_monotone_in_eta() {
        let tf = model_tf_network(1, true, (0.0, 10.0)).unwrap();
        let p = [0.5, 0.3, 1.2, 0.7];
        let mut last = f64::NEG_INFINITY;
        for k in 0..100 {
            let eta = 0.05 * k as f64;
            let v = tf.saturation(&p, 0, eta, 0.0).unwrap();
            assert!(v >= last);
            last = v;
        }
    }

    #[test]
    fn separability_detection() {
        let lv = parameter_blocks(&model_lotka_volterra());
        assert_eq!(lv, vec![(vec![0], vec![0, 1]), (vec![1], vec![2, 3])]);
        let tf = model_tf_network(17, true, (16.0, 67.0)).unwrap();
        let blocks = parameter_blocks(&tf);
        assert_eq!(blocks.len(), 1);
        assert_eq!(blocks[0].0.len(), 17);
        assert_eq!(blocks[0].1.len(), 17 * 4 + 15);
    }

    #[test]
    fn lookup_by_name() {
        for name in ["exponential", "lotka-volterra", "tf-network"] {
            assert_eq!(model_by_name(name, 3, (0.0, 1.0)).unwrap().name(), name);
        }
        assert!(model_by_name("sir", 1, (0.0, 1.0)).is_err());
    }

    #[test]
    fn normalization() {
        let v = DVector::from_vec(vec![2.0, 4.0, 3.0]);
        assert_eq!(normalize_unit(&v).as_slice(), &[0.0, 1.0, 0.5]);
        assert_eq!(
            normalize_unit(&DVector::from_vec(vec![1.0, 1.0])).as_slice(),
            &[0.0, 0.0]
        );
    }
}
