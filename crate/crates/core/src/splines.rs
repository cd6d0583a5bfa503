//! B-spline marginal bases, difference penalties, weighted sum-to-zero
//! constraint transforms and Demmler–Reinsch smoothing-parameter
//! calibration.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, sym_eigen, weighted_crossprod};

/// B-spline basis on a set of breakpoints `lo = b₀ < … < b_m = hi`.
///
/// The knot sequence is extended beyond the range by `degree` knots on each
/// side, spaced like the outermost interval, so that every basis function has
/// the usual P-spline shape and the rows of the design sum to one on
/// `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalBasis {
    breakpoints: Vec<f64>,
    degree: usize,
}

impl MarginalBasis {
    pub fn new(breakpoints: Vec<f64>, degree: usize) -> Result<Self> {
        if breakpoints.len() < 2 {
            return Err(Error::InvalidInput("a basis needs at least two breakpoints".into()));
        }
        if breakpoints.iter().any(|b| !b.is_finite()) || breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("breakpoints must be finite and strictly increasing".into()));
        }
        Ok(Self { breakpoints, degree })
    }

    /// Basis with `n_basis` functions on equidistant breakpoints over `[lo, hi]`.
    pub fn equidistant(lo: f64, hi: f64, n_basis: usize, degree: usize) -> Result<Self> {
        if n_basis < degree + 1 {
            return Err(Error::InvalidInput(format!(
                "a degree-{degree} basis needs at least {} functions, got {n_basis}",
                degree + 1
            )));
        }
        if !(hi > lo) {
            return Err(Error::InvalidInput(format!("empty basis range [{lo}, {hi}]")));
        }
        let intervals = n_basis - degree;
        let step = (hi - lo) / intervals as f64;
        let mut b: Vec<f64> = (0..=intervals).map(|i| lo + step * i as f64).collect();
        b[intervals] = hi;
        Self::new(b, degree)
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    /// Number of basis functions `K = #interior + degree + 1`.
    pub fn dim(&self) -> usize {
        self.breakpoints.len() + self.degree - 1
    }

    pub fn lower(&self) -> f64 {
        self.breakpoints[0]
    }

    pub fn upper(&self) -> f64 {
        self.breakpoints[self.breakpoints.len() - 1]
    }

    /// Full knot sequence of length `K + degree + 1`.
    pub fn augmented_knots(&self) -> Vec<f64> {
        let b = &self.breakpoints;
        let m = b.len();
        let left = b[1] - b[0];
        let right = b[m - 1] - b[m - 2];
        let mut k = Vec::with_capacity(m + 2 * self.degree);
        for i in (1..=self.degree).rev() {
            k.push(b[0] - left * i as f64);
        }
        k.extend_from_slice(b);
        for i in 1..=self.degree {
            k.push(b[m - 1] + right * i as f64);
        }
        k
    }

    /// Support `[knot_k, knot_{k+degree+1}]` of basis function `k`,
    /// intersected with the basis range.
    pub fn support(&self, k: usize) -> (f64, f64) {
        let knots = self.augmented_knots();
        (
            knots[k].max(self.lower()),
            knots[k + self.degree + 1].min(self.upper()),
        )
    }

    fn check_point(&self, x: f64) -> Result<f64> {
        let (lo, hi) = (self.lower(), self.upper());
        let eps = 1e-10 * (hi - lo);
        if !x.is_finite() || x < lo - eps || x > hi + eps {
            return Err(Error::OutOfRange { point: x, lower: lo, upper: hi });
        }
        Ok(x.clamp(lo, hi))
    }

    /// Nonzero basis values at `x`: returns the index of the first nonzero
    /// function and the `degree + 1` values.
    pub fn eval_nonzero(&self, x: f64) -> Result<(usize, Vec<f64>)> {
        let x = self.check_point(x)?;
        let p = self.degree;
        let knots = self.augmented_knots();
        let k = self.dim();
        // span index i with knots[i] <= x < knots[i+1], i in [p, k-1]
        let mut span = p;
        while span < k - 1 && x >= knots[span + 1] {
            span += 1;
        }
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = x - knots[span + 1 - j];
            right[j] = knots[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = n[r] / (right[r + 1] + left[j - r]);
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((span - p, n))
    }

    /// Dense row of all `K` basis values at `x`.
    pub fn eval_row(&self, x: f64) -> Result<Vec<f64>> {
        let (first, vals) = self.eval_nonzero(x)?;
        let mut row = vec![0.0; self.dim()];
        row[first..first + vals.len()].copy_from_slice(&vals);
        Ok(row)
    }
}

/// Evaluation matrix `[Φ_k(x_i)]`.
pub fn bspline_design(basis: &MarginalBasis, points: &[f64]) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(points.len(), basis.dim());
    for (i, &x) in points.iter().enumerate() {
        let (first, vals) = basis.eval_nonzero(x)?;
        for (k, v) in vals.into_iter().enumerate() {
            m[(i, first + k)] = v;
        }
    }
    Ok(m)
}

/// Order-`d` difference matrix of size `(K − d) × K`.
pub fn difference_matrix(k: usize, order: usize) -> Result<DMatrix<f64>> {
    if order == 0 || k <= order {
        return Err(Error::InvalidInput(format!(
            "difference penalty needs K > order >= 1, got K={k}, order={order}"
        )));
    }
    let mut d = DMatrix::<f64>::identity(k, k);
    for _ in 0..order {
        let r = d.nrows();
        let mut next = DMatrix::zeros(r - 1, k);
        for i in 0..r - 1 {
            let row = d.row(i + 1) - d.row(i);
            next.set_row(i, &row);
        }
        d = next;
    }
    Ok(d)
}

/// Difference penalty `DᵀD`.
pub fn difference_penalty(k: usize, order: usize) -> Result<DMatrix<f64>> {
    let d = difference_matrix(k, order)?;
    Ok(d.transpose() * d)
}

/// Reparameterisation `β = Z γ` onto the subspace satisfying a set of linear
/// constraints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintTransform {
    /// `K × (K − c)` with orthonormal columns.
    pub z: DMatrix<f64>,
    /// The constraint rows (`c × K` before rank reduction).
    pub constraints: DMatrix<f64>,
}

impl ConstraintTransform {
    /// Number of independent constraints.
    pub fn rank(&self) -> usize {
        self.z.nrows() - self.z.ncols()
    }
}

/// Null-space basis of `ψᵀ` (`Σ_e ψ_e β_e = 0`).
pub fn sum_to_zero_transform(psi: &[f64]) -> Result<ConstraintTransform> {
    if psi.len() < 2 {
        return Err(Error::InvalidInput("sum-to-zero constraint needs at least 2 levels".into()));
    }
    if let Some(e) = psi.iter().position(|p| !(*p > 0.0)) {
        return Err(Error::InvalidInput(format!("level weight psi[{e}] must be positive")));
    }
    let c = DMatrix::from_row_slice(1, psi.len(), psi);
    let z = linalg::null_space(&c);
    Ok(ConstraintTransform { z, constraints: c })
}

/// Joint null space of the row and column constraints
/// `Σ_e ψ_{e,f} β_{e,f} = 0 ∀f` and `Σ_f ψ_{e,f} β_{e,f} = 0 ∀e`, with
/// cells ordered `e·φ + f`.
pub fn double_sum_to_zero_transform(psi: &DMatrix<f64>) -> Result<ConstraintTransform> {
    let (eta, phi) = psi.shape();
    if eta == 0 || phi == 0 {
        return Err(Error::InvalidInput("empty cell-weight matrix".into()));
    }
    if psi.iter().any(|p| !(*p > 0.0)) {
        return Err(Error::InvalidInput(
            "empty cell in doubly-varying constraint (psi_ef = 0)".into(),
        ));
    }
    let mut c = DMatrix::zeros(eta + phi, eta * phi);
    for f in 0..phi {
        for e in 0..eta {
            c[(f, e * phi + f)] = psi[(e, f)];
        }
    }
    for e in 0..eta {
        for f in 0..phi {
            c[(phi + e, e * phi + f)] = psi[(e, f)];
        }
    }
    let z = linalg::null_space(&c);
    Ok(ConstraintTransform { z, constraints: c })
}

/// Demmler–Reinsch eigenvalues `d_k` of a penalized least-squares problem,
/// such that `df(λ) = Σ_k 1/(1 + λ d_k)` is the trace of the hat matrix.
///
/// Built from the weighted cross-product `M = BᵀWB` and penalty `P`.
/// Directions of the coefficient space not seen by the design are profiled
/// out (Schur complement of `P`), so rank-deficient designs are handled
/// exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct DrSpectrum {
    pub eigenvalues: Vec<f64>,
}

impl DrSpectrum {
    pub fn from_gram(gram: &DMatrix<f64>, penalty: &DMatrix<f64>) -> Result<Self> {
        let k = gram.nrows();
        if gram.shape() != penalty.shape() || gram.ncols() != k {
            return Err(Error::DimensionMismatch(format!(
                "gram {:?} vs penalty {:?}",
                gram.shape(),
                penalty.shape()
            )));
        }
        let (m, u) = sym_eigen(gram);
        let mmax = m.iter().cloned().fold(0.0_f64, f64::max);
        if mmax <= 0.0 {
            return Ok(Self { eigenvalues: Vec::new() });
        }
        let tol = 1e-10 * mmax;
        let range: Vec<usize> = (0..k).filter(|&i| m[i] > tol).collect();
        let null: Vec<usize> = (0..k).filter(|&i| m[i] <= tol).collect();
        let ur = u.select_columns(&range);
        let p = linalg::symmetrize(penalty);
        let mut p_eff = ur.transpose() * &p * &ur;
        if !null.is_empty() {
            let u0 = u.select_columns(&null);
            let p00 = u0.transpose() * &p * &u0;
            let pr0 = ur.transpose() * &p * &u0;
            let pinv = linalg::pinv_sym(&p00, 1e-12);
            p_eff -= &pr0 * pinv * pr0.transpose();
        }
        let r = range.len();
        let mut d = DMatrix::zeros(r, r);
        for a in 0..r {
            for b in 0..r {
                d[(a, b)] = p_eff[(a, b)] / (m[range[a]] * m[range[b]]).sqrt();
            }
        }
        // D is congruent to the effective penalty, so both share the number
        // of zero eigenvalues; deciding nullity on the penalty scale avoids
        // amplification by small Gram eigenvalues.
        let (p_vals, _) = sym_eigen(&p_eff);
        let tol_p = 1e-10 * linalg::max_abs(&p).max(f64::MIN_POSITIVE);
        let n_null = p_vals.iter().filter(|&&v| v <= tol_p).count();
        let (vals, _) = sym_eigen(&d);
        let eigenvalues = vals
            .into_iter()
            .enumerate()
            .map(|(i, v)| if i < n_null { 0.0 } else { v.max(0.0) })
            .collect();
        Ok(Self { eigenvalues })
    }

    /// Union of spectra of independent (block-diagonal) problems.
    pub fn union<I: IntoIterator<Item = DrSpectrum>>(parts: I) -> Self {
        let mut eigenvalues: Vec<f64> = parts.into_iter().flat_map(|s| s.eigenvalues).collect();
        eigenvalues.sort_by(f64::total_cmp);
        Self { eigenvalues }
    }

    /// Rank of the (weighted) design, i.e. `df(0)`.
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Dimension of the unpenalized part, i.e. `df(∞)`.
    pub fn null_dim(&self) -> usize {
        self.eigenvalues.iter().filter(|&&d| d == 0.0).count()
    }

    pub fn df(&self, lambda: f64) -> f64 {
        self.eigenvalues.iter().map(|&d| 1.0 / (1.0 + lambda * d)).sum()
    }

    /// Smoothing parameter whose hat-matrix trace equals `df_target`.
    ///
    /// Bisection on `ln λ`, starting from `[−12, 12]` and widening the bracket
    /// in steps of 12 until it contains the target.
    pub fn lambda_for_df(&self, df_target: f64) -> Result<f64> {
        let max = self.rank() as f64;
        let min = self.null_dim() as f64;
        if !df_target.is_finite() || df_target > max + 1e-9 || df_target <= min + 1e-9 {
            return Err(Error::DfUnattainable { target: df_target, min, max });
        }
        if df_target >= max - 1e-12 {
            return Ok(0.0);
        }
        let f = |log_l: f64| self.df(log_l.exp()) - df_target;
        let (mut lo, mut hi) = (-12.0_f64, 12.0_f64);
        while f(lo) < 0.0 {
            lo -= 12.0;
            if lo < -700.0 {
                return Ok(0.0);
            }
        }
        while f(hi) > 0.0 {
            hi += 12.0;
            if hi > 700.0 {
                return Err(Error::DfUnattainable { target: df_target, min, max });
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let v = f(mid);
            if v.abs() < 1e-10 {
                return Ok(mid.exp());
            }
            if v > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }
}

/// Smoothing parameter λ such that the trace of
/// `W^{1/2} B (BᵀWB + λP)⁻¹ BᵀW^{1/2}` equals `df_target`.
pub fn demmler_reinsch_lambda(
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    df_target: f64,
    obs_weights: &[f64],
) -> Result<f64> {
    if design.nrows() != obs_weights.len() {
        return Err(Error::DimensionMismatch("design rows vs weights".into()));
    }
    let gram = weighted_crossprod(design, obs_weights);
    DrSpectrum::from_gram(&gram, penalty)?.lambda_for_df(df_target)
}
