//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Kronecker product `a ⊗ b`.
pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    let mut out = DMatrix::zeros(ar * br, ac * bc);
    for j in 0..ac {
        for i in 0..ar {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            for q in 0..bc {
                for p in 0..br {
                    out[(i * br + p, j * bc + q)] = aij * b[(p, q)];
                }
            }
        }
    }
    out
}

/// Kronecker sum `a ⊕ b = a ⊗ I + I ⊗ b` of two square matrices.
pub fn kron_sum(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let ia = DMatrix::identity(a.nrows(), a.nrows());
    let ib = DMatrix::identity(b.nrows(), b.nrows());
    kron(a, &ib) + kron(&ia, b)
}

/// `Xᵀ diag(w) X` for nonnegative weights.
pub fn weighted_crossprod(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    debug_assert_eq!(x.nrows(), w.len());
    let mut scaled = x.clone();
    for (i, &wi) in w.iter().enumerate() {
        let s = wi.sqrt();
        scaled.row_mut(i).scale_mut(s);
    }
    let t = scaled.transpose();
    &t * &scaled
}

/// `Xᵀ diag(w) y`.
pub fn weighted_xty(x: &DMatrix<f64>, w: &[f64], y: &[f64]) -> DVector<f64> {
    let wy = DVector::from_iterator(y.len(), y.iter().zip(w).map(|(a, b)| a * b));
    x.tr_mul(&wy)
}

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
pub fn sym_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `(m + mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix, truncating
/// eigenvalues below `rel_tol * max_eigenvalue`.
pub fn pinv_sym(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let (vals, vecs) = sym_eigen(m);
    let max = vals.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rel_tol * max;
    let mut out = DMatrix::zeros(n, n);
    for (k, &v) in vals.iter().enumerate() {
        if v > cutoff && v > 0.0 {
            let col = vecs.column(k);
            out += (&col * col.transpose()) / v;
        }
    }
    out
}

/// Cholesky factor of a symmetric matrix, rejected when the factor's
/// diagonal spread signals numerical singularity.
pub fn stable_cholesky(m: &DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let chol = symmetrize(m).cholesky()?;
    let d = chol.l_dirty().diagonal();
    let (lo, hi) = d.iter().fold((f64::INFINITY, 0.0_f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    (lo > 1e-7 * hi).then_some(chol)
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    stable_cholesky(m).map(|c| c.inverse())
}

/// Orthonormal basis of the null space of the row space of `rows`
/// (`rows · Z = 0`), computed from an eigendecomposition of `rowsᵀ rows`
/// after normalising each row. Columns are sign-normalised so that their
/// first entry above `1e-12` in magnitude is positive.
pub fn null_space(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let k = rows.ncols();
    let mut normed = rows.clone();
    for mut r in normed.row_iter_mut() {
        let norm = r.norm();
        if norm > 0.0 {
            r /= norm;
        }
    }
    let gram = normed.transpose() * &normed;
    let (vals, vecs) = sym_eigen(&gram);
    let max = vals.iter().cloned().fold(0.0_f64, f64::max).max(1.0);
    let keep: Vec<usize> = (0..k).filter(|&i| vals[i] <= 1e-10 * max).collect();
    let mut z = DMatrix::zeros(k, keep.len());
    for (dst, &src) in keep.iter().enumerate() {
        let mut col = vecs.column(src).into_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-12) {
            if *first < 0.0 {
                col.neg_mut();
            }
        }
        z.set_column(dst, &col);
    }
    z
}

/// Solve `a x = b` for symmetric `a`, using Cholesky when it succeeds.
/// When the system is singular, a pseudo-inverse solution is returned unless
/// `allow_singular` is false.
pub fn solve_sym(a: &DMatrix<f64>, b: &DVector<f64>, allow_singular: bool) -> Result<DVector<f64>> {
    if let Some(chol) = stable_cholesky(a) {
        return Ok(chol.solve(b));
    }
    if !allow_singular {
        return Err(Error::RankDeficient(format!(
            "{}x{} system is not positive definite",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(pinv_sym(a, 1e-12) * b)
}

/// Largest absolute entry.
pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

/// Empirical quantile with linear interpolation between order statistics
/// (the "type 7" definition). `sorted` must be ascending and nonempty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}
