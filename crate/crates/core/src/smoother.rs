//! Penalized B-spline surrogates for the observed states.
//!
//! Each state is smoothed independently with a cubic B-spline basis and a
//! second-order difference penalty on the coefficients. The smoothing weight is
//! either fixed or chosen by generalized cross-validation.

use nalgebra::{DMatrix, DVector};

use crate::data::ObservationSet;
use crate::error::{Error, Result};
use crate::operators::TimeGrid;

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    degree: usize,
    knots: Vec<f64>,
    lo: f64,
    hi: f64,
}

impl SplineBasis {
    /// Clamped basis on `[lo, hi]` with the given strictly increasing interior
    /// knots. The boundary knots are repeated `degree + 1` times.
    pub fn new(degree: usize, lo: f64, hi: f64, interior: &[f64]) -> Result<Self> {
        if !(hi > lo) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "invalid spline span [{lo}, {hi}]"
            )));
        }
        if degree == 0 {
            return Err(Error::InvalidParameter(
                "spline degree must be at least 1".into(),
            ));
        }
        let mut prev = lo;
        for &k in interior {
            if !(k > prev) || !(k < hi) {
                return Err(Error::InvalidParameter(format!(
                    "interior knots must be strictly increasing inside ({lo}, {hi}); got {k}"
                )));
            }
            prev = k;
        }
        let mut knots = Vec::with_capacity(interior.len() + 2 * (degree + 1));
        knots.extend(std::iter::repeat_n(lo, degree + 1));
        knots.extend_from_slice(interior);
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(Self {
            degree,
            knots,
            lo,
            hi,
        })
    }

    /// Cubic basis with a knot at every grid time.
    pub fn at_grid(grid: &TimeGrid) -> Result<Self> {
        let t = grid.times();
        Self::new(3, grid.first(), grid.last(), &t[1..t.len() - 1])
    }

    /// Basis of `n_basis` functions with equally spaced knots on `[lo, hi]`.
    pub fn uniform(degree: usize, lo: f64, hi: f64, n_basis: usize) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::InvalidParameter(format!(
                "a degree-{degree} basis needs at least {} functions, asked for {n_basis}",
                degree + 1
            )));
        }
        let n_interior = n_basis - degree - 1;
        let step = (hi - lo) / (n_interior + 1) as f64;
        let interior: Vec<f64> = (1..=n_interior).map(|i| lo + step * i as f64).collect();
        Self::new(degree, lo, hi, &interior)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn n_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    pub fn span(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    fn check_span(&self, t: f64) -> Result<()> {
        // Allow round-off at the ends of the span.
        let slack = 1e-12 * (self.hi - self.lo).max(1.0);
        if t.is_finite() && t >= self.lo - slack && t <= self.hi + slack {
            Ok(())
        } else {
            Err(Error::OutOfSpan {
                time: t,
                lo: self.lo,
                hi: self.hi,
            })
        }
    }

    /// Index `k` of the knot interval `[knots[k], knots[k+1])` containing `t`.
    fn find_interval(&self, t: f64) -> usize {
        let p = self.degree;
        let last = self.n_basis() - 1;
        if t >= self.knots[last + 1] {
            return last;
        }
        if t <= self.knots[p] {
            return p;
        }
        // knots[p..=last+1] is increasing; binary search for the interval.
        let (mut low, mut high) = (p, last + 1);
        while high - low > 1 {
            let mid = (low + high) / 2;
            if t < self.knots[mid] {
                high = mid;
            } else {
                low = mid;
            }
        }
        low
    }

    /// Values of all basis functions at `t` (length `n_basis`).
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        self.check_span(t)?;
        let t = t.clamp(self.lo, self.hi);
        let mut row = DVector::zeros(self.n_basis());
        let span = self.find_interval(t);
        let local = self.nonzero_basis(span, t);
        for (r, v) in local.into_iter().enumerate() {
            row[span - self.degree + r] = v;
        }
        Ok(row)
    }

    /// Cox–de Boor recursion for the `degree + 1` functions nonzero on `span`.
    fn nonzero_basis(&self, span: usize, t: f64) -> Vec<f64> {
        let p = self.degree;
        let u = &self.knots;
        let mut values = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        values[0] = 1.0;
        for j in 1..=p {
            left[j] = t - u[span + 1 - j];
            right[j] = u[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom != 0.0 { values[r] / denom } else { 0.0 };
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        values
    }

    /// Design matrix `Φ` with one row per time.
    pub fn design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let q = self.n_basis();
        let mut phi = DMatrix::zeros(times.len(), q);
        for (i, &t) in times.iter().enumerate() {
            let row = self.eval(t)?;
            phi.row_mut(i).copy_from(&row.transpose());
        }
        Ok(phi)
    }

    /// Greville abscissae: the knot averages at which coefficients of a
    /// linear function equal its values.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.n_basis())
            .map(|i| self.knots[i + 1..i + p + 1].iter().sum::<f64>() / p as f64)
            .collect()
    }

    /// Second-order difference penalty `R = D₂ᵀD₂` on the coefficients.
    ///
    /// Differences are taken against the Greville abscissae and rescaled by
    /// the local spacing, so rows reduce to `(1, −2, 1)` where the abscissae
    /// are equally spaced and linear functions carry no penalty near the
    /// clamped ends either.
    pub fn penalty(&self) -> DMatrix<f64> {
        let q = self.n_basis();
        if q < 3 {
            return DMatrix::zeros(q, q);
        }
        let g = self.greville();
        let mut d2 = DMatrix::zeros(q - 2, q);
        for i in 0..q - 2 {
            let h0 = g[i + 1] - g[i];
            let h1 = g[i + 2] - g[i + 1];
            let mid = 0.5 * (h0 + h1);
            d2[(i, i)] = mid / h0;
            d2[(i, i + 1)] = -mid / h0 - mid / h1;
            d2[(i, i + 2)] = mid / h1;
        }
        d2.tr_mul(&d2)
    }
}

/// How the surrogate smoothing weight is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum Smoothing {
    Fixed(f64),
    /// Minimize GCV over the listed weights.
    Gcv(Vec<f64>),
}

impl Smoothing {
    /// GCV over 33 log-spaced weights from 1e-6 to 1e2.
    pub fn gcv_default() -> Self {
        Self::Gcv(
            (0..=32)
                .map(|i| 10f64.powf(-6.0 + 0.25 * i as f64))
                .collect(),
        )
    }
}

impl Default for Smoothing {
    fn default() -> Self {
        Self::gcv_default()
    }
}

/// Fit of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateFit {
    pub coefficients: DVector<f64>,
    pub smoothing: f64,
    /// Trace of the hat matrix.
    pub edf: f64,
    /// Weighted residual sum of squares.
    pub rss: f64,
    pub gcv: f64,
}

/// Penalized spline smooth of every observed state.
#[derive(Debug, Clone, PartialEq)]
pub struct Surrogate {
    basis: SplineBasis,
    fits: Vec<StateFit>,
    n_obs: usize,
}

impl Surrogate {
    pub fn basis(&self) -> &SplineBasis {
        &self.basis
    }

    pub fn fits(&self) -> &[StateFit] {
        &self.fits
    }

    pub fn coefficients(&self, j: usize) -> &DVector<f64> {
        &self.fits[j].coefficients
    }

    pub fn n_states(&self) -> usize {
        self.fits.len()
    }

    /// Residual variance per state, `rss / (n - edf)`.
    pub fn residual_variances(&self) -> Vec<f64> {
        self.fits
            .iter()
            .map(|f| f.rss / (self.n_obs as f64 - f.edf).max(1.0))
            .collect()
    }

    /// Residual variance pooled over all states.
    pub fn pooled_variance(&self) -> f64 {
        let rss: f64 = self.fits.iter().map(|f| f.rss).sum();
        let dof: f64 = self
            .fits
            .iter()
            .map(|f| (self.n_obs as f64 - f.edf).max(1.0))
            .sum();
        rss / dof
    }

    /// Evaluations `x̂'(t)` as an m × |grid| matrix.
    pub fn eval(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let phi = self.basis.design(times)?;
        let mut out = DMatrix::zeros(self.fits.len(), times.len());
        for (j, fit) in self.fits.iter().enumerate() {
            let values = &phi * &fit.coefficients;
            out.row_mut(j).copy_from(&values.transpose());
        }
        Ok(out)
    }
}

pub fn fit_surrogate(
    obs: &ObservationSet,
    basis: &SplineBasis,
    weights: Option<&DMatrix<f64>>,
    smoothing: &Smoothing,
) -> Result<Surrogate> {
    let n = obs.n_times();
    let phi = basis.design(obs.grid().times())?;
    let identity;
    let w = match weights {
        Some(w) => {
            if w.nrows() != n || w.ncols() != n {
                return Err(Error::Dimension(format!(
                    "weight matrix is {}x{}, expected {n}x{n}",
                    w.nrows(),
                    w.ncols()
                )));
            }
            w
        }
        None => {
            identity = DMatrix::identity(n, n);
            &identity
        }
    };
    let wphi = w * &phi;
    let gram = phi.tr_mul(&wphi);
    let penalty = basis.penalty();

    let mut fits = Vec::with_capacity(obs.n_states());
    for j in 0..obs.n_states() {
        let y = obs.state(j);
        let rhs = wphi.tr_mul(&y);
        let fit = match smoothing {
            Smoothing::Fixed(mu) => solve_state(&phi, w, &gram, &penalty, &rhs, &y, *mu)?,
            Smoothing::Gcv(candidates) => {
                if candidates.is_empty() {
                    return Err(Error::InvalidParameter("empty GCV grid".into()));
                }
                let mut best: Option<StateFit> = None;
                for &mu in candidates {
                    let Ok(fit) = solve_state(&phi, w, &gram, &penalty, &rhs, &y, mu) else {
                        continue;
                    };
                    if best.as_ref().is_none_or(|b| fit.gcv < b.gcv) {
                        best = Some(fit);
                    }
                }
                best.ok_or(Error::UnderdeterminedSmoother)?
            }
        };
        fits.push(fit);
    }
    Ok(Surrogate {
        basis: basis.clone(),
        fits,
        n_obs: n,
    })
}

fn solve_state(
    phi: &DMatrix<f64>,
    w: &DMatrix<f64>,
    gram: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    rhs: &DVector<f64>,
    y: &DVector<f64>,
    mu: f64,
) -> Result<StateFit> {
    if !(mu >= 0.0) || !mu.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "smoothing weight must be finite and non-negative, got {mu}"
        )));
    }
    let n = phi.nrows();
    let normal = gram + penalty * mu;
    let scale = normal.diagonal().amax().max(f64::MIN_POSITIVE);
    if mu == 0.0 {
        if phi.ncols() > n {
            return Err(Error::UnderdeterminedSmoother);
        }
        let eig = normal.clone().symmetric_eigen();
        if eig.eigenvalues.min() <= 1e-12 * scale {
            return Err(Error::UnderdeterminedSmoother);
        }
    }
    let chol = normal
        .clone()
        .cholesky()
        .ok_or(Error::UnderdeterminedSmoother)?;
    let coefficients = chol.solve(rhs);
    let residual = y - phi * &coefficients;
    let rss = residual.dot(&(w * &residual));
    // tr(Φ A⁻¹ ΦᵀW) = tr(A⁻¹ ΦᵀWΦ)
    let edf = chol.solve(gram).trace();
    let denom = n as f64 - edf;
    let gcv = if denom > 1e-8 {
        n as f64 * rss / (denom * denom)
    } else {
        f64::INFINITY
    };
    Ok(StateFit {
        coefficients,
        smoothing: mu,
        edf,
        rss,
        gcv,
    })
}
