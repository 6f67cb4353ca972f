//! Discrete difference operators on an observation grid.
//!
//! The polynomial operator `P = Σ θ_k D^(k-1)` acts on state values sampled on
//! the grid. Its Gram matrix `PᵀP` is the inverse of the discrete Green's
//! kernel; the kernel itself is never formed.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{Error, Result};

/// Factorizations whose 1-norm condition estimate exceeds this are rejected.
pub const CONDITION_CAP: f64 = 1e12;

/// Strictly increasing observation times with at least three points.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 time points, got {}",
                times.len()
            )));
        }
        if let Some(t) = times.iter().find(|t| !t.is_finite()) {
            return Err(Error::InvalidGrid(format!("non-finite time {t}")));
        }
        if let Some(i) = times.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::InvalidGrid(format!(
                "times must be strictly increasing: t[{}] = {} >= t[{}] = {}",
                i,
                times[i],
                i + 1,
                times[i + 1]
            )));
        }
        Ok(Self { times })
    }

    /// `n` equally spaced points on `[start, end]`, endpoints included.
    pub fn uniform(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 || !(end > start) {
            return Err(Error::InvalidGrid(format!(
                "cannot build a uniform grid of {n} points on [{start}, {end}]"
            )));
        }
        let step = (end - start) / (n - 1) as f64;
        let mut times: Vec<f64> = (0..n).map(|i| start + step * i as f64).collect();
        times[n - 1] = end;
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.times[0]
    }

    pub fn last(&self) -> f64 {
        self.times[self.times.len() - 1]
    }
}

/// Scaling of the interior rows of the first-order difference operator.
///
/// `Central` is the consistent central difference `(x[i+1] - x[i-1]) / (t[i+1] - t[i-1])`.
/// `Halved` divides by `2 (t[i+1] - t[i-1])` instead, which is the form the
/// method was originally written down with; it underestimates slopes by a
/// factor of two and is kept for comparison only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Stencil {
    #[default]
    Central,
    Halved,
}

impl std::str::FromStr for Stencil {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "central" => Ok(Self::Central),
            "halved" => Ok(Self::Halved),
            other => Err(Error::InvalidParameter(format!(
                "unknown stencil `{other}` (expected `central` or `halved`)"
            ))),
        }
    }
}

/// First-order difference operator `D` on a [`TimeGrid`].
///
/// Row 1 is a forward difference, row n a backward difference and interior
/// rows are two-sided with a zero diagonal. Powers `D^0 ..= D^3` are cached.
#[derive(Debug, Clone)]
pub struct DifferenceOperator {
    matrix: DMatrix<f64>,
    powers: Vec<DMatrix<f64>>,
    stencil: Stencil,
}

const CACHED_POWERS: usize = 4;

impl DifferenceOperator {
    pub fn new(grid: &TimeGrid, stencil: Stencil) -> Result<Self> {
        let t = grid.times();
        let n = t.len();
        if n < 3 {
            return Err(Error::InvalidGrid(format!(
                "need at least 3 points, got {n}"
            )));
        }
        let mut d = DMatrix::zeros(n, n);
        let first = 1.0 / (t[1] - t[0]);
        d[(0, 0)] = -first;
        d[(0, 1)] = first;
        for i in 1..n - 1 {
            let span = t[i + 1] - t[i - 1];
            let w = match stencil {
                Stencil::Central => 1.0 / span,
                Stencil::Halved => 1.0 / (2.0 * span),
            };
            d[(i, i - 1)] = -w;
            d[(i, i + 1)] = w;
        }
        let last = 1.0 / (t[n - 1] - t[n - 2]);
        d[(n - 1, n - 2)] = -last;
        d[(n - 1, n - 1)] = last;

        let mut powers = Vec::with_capacity(CACHED_POWERS);
        powers.push(DMatrix::identity(n, n));
        for k in 1..CACHED_POWERS {
            let next = &powers[k - 1] * &d;
            powers.push(next);
        }
        Ok(Self {
            matrix: d,
            powers,
            stencil,
        })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn stencil(&self) -> Stencil {
        self.stencil
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `D^k`, with `D^0 = I`.
    pub fn power(&self, k: usize) -> std::borrow::Cow<'_, DMatrix<f64>> {
        if k < self.powers.len() {
            return std::borrow::Cow::Borrowed(&self.powers[k]);
        }
        let mut acc = self.powers[self.powers.len() - 1].clone();
        for _ in self.powers.len() - 1..k {
            acc = &acc * &self.matrix;
        }
        std::borrow::Cow::Owned(acc)
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }
}

/// Realized polynomial difference operator `P_θ = Σ_k θ_k D^(k-1)` with its
/// LU factorization.
#[derive(Debug, Clone)]
pub struct OperatorMatrix {
    theta: Vec<f64>,
    matrix: DMatrix<f64>,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    condition: f64,
}

impl OperatorMatrix {
    pub fn new(theta: &[f64], diff: &DifferenceOperator) -> Result<Self> {
        if theta.is_empty() {
            return Err(Error::InvalidParameter(
                "operator needs at least one coefficient".into(),
            ));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "non-finite operator coefficients {theta:?}"
            )));
        }
        let n = diff.dim();
        let mut matrix = DMatrix::zeros(n, n);
        for (k, &coef) in theta.iter().enumerate() {
            if coef != 0.0 {
                matrix += diff.power(k).as_ref() * coef;
            }
        }
        let singular = |condition| Error::SingularOperator {
            theta: theta.to_vec(),
            condition,
        };
        let lu = LU::new(matrix.clone());
        let lu_t = LU::new(matrix.transpose());
        let condition = condition_estimate_1norm(&matrix, &lu, &lu_t);
        if !(condition <= CONDITION_CAP) {
            return Err(singular(condition));
        }
        Ok(Self {
            theta: theta.to_vec(),
            matrix,
            lu,
            condition,
        })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// 1-norm condition estimate computed at factorization time.
    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.matrix * x
    }

    /// Solves `P z = rhs`.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        if rhs.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "rhs has length {}, operator is {}x{}",
                rhs.len(),
                self.dim(),
                self.dim()
            )));
        }
        self.lu.solve(rhs).ok_or_else(|| Error::SingularOperator {
            theta: self.theta.clone(),
            condition: f64::INFINITY,
        })
    }

    pub fn kernel_inverse(&self) -> KernelInverse {
        KernelInverse::from_operator(self)
    }
}

/// `PᵀP`, the inverse of the discrete Green's kernel, stored symmetrized.
#[derive(Debug, Clone)]
pub struct KernelInverse {
    gram: DMatrix<f64>,
}

impl KernelInverse {
    pub fn from_operator(op: &OperatorMatrix) -> Self {
        let gram = op.matrix().tr_mul(op.matrix());
        Self::from_gram(gram)
    }

    /// Wraps an arbitrary square matrix, storing `(M + Mᵀ) / 2`.
    pub fn from_gram(gram: DMatrix<f64>) -> Self {
        let sym = (&gram + gram.transpose()) * 0.5;
        Self { gram: sym }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// `xᵀ (PᵀP) x`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.gram * x))
    }

    /// `I + c PᵀP`, symmetric positive definite for `c > 0`.
    pub fn shifted(&self, c: f64) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = &self.gram * c;
        for i in 0..n {
            m[(i, i)] += 1.0;
        }
        m
    }
}

pub fn build_difference_operator(grid: &TimeGrid) -> Result<DifferenceOperator> {
    DifferenceOperator::new(grid, Stencil::default())
}

pub fn build_operator_matrix(theta: &[f64], diff: &DifferenceOperator) -> Result<OperatorMatrix> {
    OperatorMatrix::new(theta, diff)
}

pub fn kernel_inverse(op: &OperatorMatrix) -> KernelInverse {
    op.kernel_inverse()
}

pub fn solve_operator(op: &OperatorMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    op.solve(rhs)
}

/// Hager–Higham estimate of `‖A‖₁ ‖A⁻¹‖₁` using solves with `A` and `Aᵀ`.
/// Returns `+inf` when either factorization is singular.
fn condition_estimate_1norm(
    a: &DMatrix<f64>,
    lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    lu_t: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
) -> f64 {
    let n = a.nrows();
    let norm_a = (0..n)
        .map(|j| a.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    if !norm_a.is_finite() {
        return f64::INFINITY;
    }
    if !lu.is_invertible() || !lu_t.is_invertible() {
        return f64::INFINITY;
    }

    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    let mut last_index = usize::MAX;
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else {
            return f64::INFINITY;
        };
        estimate = y.lp_norm(1);
        let xi = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = lu_t.solve(&xi) else {
            return f64::INFINITY;
        };
        let j = z.iamax();
        if z[j].abs() <= z.dot(&x) || j == last_index {
            break;
        }
        last_index = j;
        x.fill(0.0);
        x[j] = 1.0;
    }

    // Higham's alternating test vector guards against the few matrices that
    // fool the power iteration above.
    let alt = DVector::from_fn(n, |i, _| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * (1.0 + i as f64 / (n.max(2) - 1) as f64)
    });
    if let Some(w) = lu.solve(&alt) {
        estimate = estimate.max(2.0 * w.lp_norm(1) / (3.0 * n as f64));
    }

    let cond = norm_a * estimate;
    if cond.is_finite() {
        cond
    } else {
        f64::INFINITY
    }
}
