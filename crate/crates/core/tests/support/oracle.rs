//! Independent oracles shared by the integration and acceptance suites.
//!
//! Everything here is written from the defining formulas with explicit
//! inverses and dense solves, without touching the library's evaluation path.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use odekernel::likelihood::ProfileContext;
use odekernel::models::ForcingInputs;
use odekernel::rng::seeded;
use odekernel::{
    DifferenceOperator, ModelSpec, ObservationSet, ParamInfo, ParamRole, Result, Stencil, TimeGrid,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Linear test system `P_θj x_j = β_j g_j + γ_j x̂'_{other}` with free
/// operator coefficients. Parameters per equation: the `order + 1`
/// coefficients of `θ_j`, then `β_j`, then `γ_j`.
pub struct RandomLinear {
    pub orders: Vec<usize>,
    pub shapes: Vec<DVector<f64>>,
}

impl RandomLinear {
    fn offset(&self, j: usize) -> usize {
        self.orders[..j].iter().map(|d| d + 3).sum()
    }
}

impl ModelSpec for RandomLinear {
    fn name(&self) -> &str {
        "random-linear"
    }

    fn n_equations(&self) -> usize {
        self.orders.len()
    }

    fn params(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (j, &d) in self.orders.iter().enumerate() {
            for k in 0..=d {
                out.push(ParamInfo {
                    name: format!("theta_{j}_{k}"),
                    role: ParamRole::Theta,
                });
            }
            for name in ["beta", "gamma"] {
                out.push(ParamInfo {
                    name: format!("{name}_{j}"),
                    role: ParamRole::Beta,
                });
            }
        }
        out
    }

    fn operator_coefficients(&self, params: &[f64], j: usize) -> Vec<f64> {
        let o = self.offset(j);
        params[o..=o + self.orders[j]].to_vec()
    }

    fn forcing(
        &self,
        params: &[f64],
        j: usize,
        inputs: &ForcingInputs<'_>,
    ) -> Result<DVector<f64>> {
        let o = self.offset(j) + self.orders[j] + 1;
        let (beta, gamma) = (params[o], params[o + 1]);
        let other = (j + 1) % self.orders.len();
        let coupled = inputs.surrogate.row(other).transpose();
        Ok(&self.shapes[j] * beta + coupled * gamma)
    }

    fn dependencies(&self) -> Vec<Vec<usize>> {
        (0..self.orders.len())
            .map(|j| {
                let o = self.offset(j);
                (o..o + self.orders[j] + 3).collect()
            })
            .collect()
    }
}

/// Strictly increasing random grid with gaps in `[0.2, 1.2]`.
pub fn random_times(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut t = Vec::with_capacity(n);
    let mut now = rng.random_range(-1.0..1.0);
    for _ in 0..n {
        t.push(now);
        now += rng.random_range(0.2..1.2);
    }
    t
}

/// Explicit difference operator: forward, two-sided central, backward rows.
pub fn explicit_difference(t: &[f64]) -> DMatrix<f64> {
    let n = t.len();
    let mut d = DMatrix::zeros(n, n);
    d[(0, 0)] = -1.0 / (t[1] - t[0]);
    d[(0, 1)] = 1.0 / (t[1] - t[0]);
    for i in 1..n - 1 {
        let w = 1.0 / (t[i + 1] - t[i - 1]);
        d[(i, i - 1)] = -w;
        d[(i, i + 1)] = w;
    }
    d[(n - 1, n - 2)] = -1.0 / (t[n - 1] - t[n - 2]);
    d[(n - 1, n - 1)] = 1.0 / (t[n - 1] - t[n - 2]);
    d
}

/// `Σ θ_k D^k` with plain repeated products.
pub fn explicit_operator(theta: &[f64], d: &DMatrix<f64>) -> DMatrix<f64> {
    let n = d.nrows();
    let mut power = DMatrix::identity(n, n);
    let mut p = DMatrix::zeros(n, n);
    for &c in theta {
        p += &power * c;
        power = &power * d;
    }
    p
}

/// Negative penalized log-likelihood of the defining form for one equation,
/// at the states `x = Kα + P⁻¹f` with `K = (PᵀP)⁻¹` formed explicitly and
/// `α = (K + σ²λI)⁻¹ ỹ` by a direct solve.
pub fn profiled_by_direct_solve(
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    f: &DVector<f64>,
    sigma2: f64,
    lambda: f64,
) -> f64 {
    let n = p.nrows();
    let p_inv = p.clone().try_inverse().expect("invertible operator");
    let k = (p.transpose() * p)
        .try_inverse()
        .expect("invertible Gram matrix");
    let particular = &p_inv * f;
    let y_tilde = y - &particular;
    let system = &k + DMatrix::identity(n, n) * (sigma2 * lambda);
    let alpha = system.lu().solve(&y_tilde).expect("solvable");
    let x = &k * &alpha + &particular;
    let fit = (y - &x).norm_squared() / (2.0 * sigma2);
    let penalty = 0.5 * lambda * (p * &x - f).norm_squared();
    fit + penalty
}

/// Same quantity minimized numerically over `x` instead of `α`: the normal
/// equations `(I/σ² + λPᵀP) x = y/σ² + λPᵀf`.
pub fn minimized_over_states(
    p: &DMatrix<f64>,
    y: &DVector<f64>,
    f: &DVector<f64>,
    sigma2: f64,
    lambda: f64,
) -> f64 {
    let n = p.nrows();
    let normal = DMatrix::identity(n, n) / sigma2 + p.transpose() * p * lambda;
    let rhs = y / sigma2 + p.transpose() * f * lambda;
    let x = normal.lu().solve(&rhs).expect("solvable");
    (y - &x).norm_squared() / (2.0 * sigma2) + 0.5 * lambda * (p * &x - f).norm_squared()
}

/// Random linear system, data, surrogate, variances and λ.
pub struct Instance {
    pub model: RandomLinear,
    pub obs: ObservationSet,
    pub surrogate: DMatrix<f64>,
    pub params: Vec<f64>,
    pub sigma2: Vec<f64>,
    pub lambda: f64,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = seeded(seed);
    let n = rng.random_range(3..=12);
    let m = rng.random_range(1..=2);
    let times = random_times(&mut rng, n);
    let d = explicit_difference(&times);
    let orders: Vec<usize> = (0..m).map(|_| rng.random_range(0..=2)).collect();
    let mut params = Vec::new();
    for &order in &orders {
        // Redraw until the operator is comfortably invertible.
        loop {
            let theta: Vec<f64> = (0..=order).map(|_| rng.random_range(-2.0..2.0)).collect();
            let p = explicit_operator(&theta, &d);
            let sv = p.clone().singular_values();
            if sv.min() > 1e-2 * sv.max() {
                params.extend(theta);
                break;
            }
        }
        params.push(rng.random_range(-2.0..2.0));
        params.push(rng.random_range(-1.0..1.0));
    }
    let shapes = (0..m)
        .map(|_| DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0)))
        .collect();
    let states = DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0));
    let surrogate = DMatrix::from_fn(m, n, |_, _| rng.random_range(-3.0..3.0));
    let obs = ObservationSet::new(TimeGrid::new(times).unwrap(), states, None).unwrap();
    Instance {
        model: RandomLinear { orders, shapes },
        obs,
        surrogate,
        params,
        sigma2: (0..m)
            .map(|_| 10f64.powf(rng.random_range(-2.0..0.0)))
            .collect(),
        lambda: 10f64.powf(rng.random_range(-2.0..3.0)),
    }
}

pub fn context(inst: &Instance) -> ProfileContext<'_> {
    let diff = DifferenceOperator::new(inst.obs.grid(), Stencil::Central).unwrap();
    ProfileContext::new(
        &inst.model,
        &inst.obs,
        inst.surrogate.clone(),
        inst.lambda,
        inst.sigma2.clone(),
        diff,
    )
    .unwrap()
}

/// Sum over equations of the defining objective at its optimal states.
/// `(P, y, f, σ², λ)` to the minimized per-equation objective.
pub type EquationOracle = fn(&DMatrix<f64>, &DVector<f64>, &DVector<f64>, f64, f64) -> f64;

pub fn oracle_value(inst: &Instance, solve: EquationOracle) -> f64 {
    let d = explicit_difference(inst.obs.grid().times());
    let ctx = context(inst);
    let forcing = ctx.forcing(&inst.params).unwrap();
    (0..inst.model.n_equations())
        .map(|j| {
            let p = explicit_operator(&inst.model.operator_coefficients(&inst.params, j), &d);
            solve(
                &p,
                &inst.obs.state(j),
                &forcing[j],
                inst.sigma2[j],
                inst.lambda,
            )
        })
        .sum()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}
