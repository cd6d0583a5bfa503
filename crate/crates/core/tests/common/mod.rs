#![allow(dead_code)]

use histboost::fdgrid::{
    CategoricalCovariate, FunctionalCovariate, FunctionalDataset, ResponseCurve, TimeGrid,
};
use nalgebra::DMatrix;
use rand::Rng;

/// Print the one-line verdict of an acceptance criterion.
pub fn report(id: u32, name: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let line = format!("criterion {id:>2} {name}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().lock().write_all(line.as_bytes());
}

pub fn cox_de_boor(knots: &[f64], i: usize, p: usize, x: f64) -> f64 {
    if p == 0 {
        return if knots[i] <= x && x < knots[i + 1] { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + p] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * cox_de_boor(knots, i, p - 1, x);
    }
    let d2 = knots[i + p + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + p + 1] - x) / d2 * cox_de_boor(knots, i + 1, p - 1, x);
    }
    v
}

/// Values of the `k` equidistant B-splines of degree `deg` on `[lo, hi]`,
/// with the right end taken as a limit from the left.
pub fn basis_values(lo: f64, hi: f64, k: usize, deg: usize, x: f64) -> Vec<f64> {
    let h = (hi - lo) / (k - deg) as f64;
    let knots: Vec<f64> = (0..k + deg + 1).map(|j| lo + (j as f64 - deg as f64) * h).collect();
    let x = if x >= hi { hi - 1e-13 * (hi - lo) } else { x };
    (0..k).map(|i| cox_de_boor(&knots, i, deg, x)).collect()
}

pub fn trapezoid(points: &[f64]) -> Vec<f64> {
    let n = points.len();
    (0..n)
        .map(|r| {
            let left = if r > 0 { points[r] - points[r - 1] } else { 0.0 };
            let right = if r + 1 < n { points[r + 1] - points[r] } else { 0.0 };
            0.5 * (left + right)
        })
        .collect()
}

/// Entrywise Kronecker product.
pub fn kron_loops(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac, br, bc) = (a.nrows(), a.ncols(), b.nrows(), b.ncols());
    DMatrix::from_fn(ar * br, ac * bc, |r, c| a[(r / br, c / bc)] * b[(r % br, c % bc)])
}

pub fn max_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.iter().zip(b.iter()).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Sorted grid on `[0, 1]` with both end points and random interior points.
pub fn random_grid<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n.saturating_sub(2)).map(|_| rng.random_range(0.02..0.98)).collect();
    v.push(0.0);
    v.push(1.0);
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| (*a - *b).abs() < 1e-3);
    v
}

/// Random dataset with one functional covariate `x` and categorical
/// covariates `z1` (η levels) and `z2` (φ levels), all levels present.
pub fn random_dataset<R: Rng>(rng: &mut R, n: usize, d: usize, r: usize, eta: usize, phi: usize) -> FunctionalDataset {
    let t = random_grid(rng, d);
    let s = random_grid(rng, r);
    let tg = TimeGrid::new(t).unwrap();
    let sg = TimeGrid::new(s.clone()).unwrap();
    let values = DMatrix::from_fn(n, s.len(), |_, _| rng.random_range(-2.0..2.0));
    let response = (0..n)
        .map(|_| ResponseCurve { grid: tg.clone(), values: (0..tg.len()).map(|_| rng.random_range(-1.0..1.0)).collect() })
        .collect();
    let lab = |p: &str, k: usize| (0..k).map(|j| format!("{p}{j}")).collect::<Vec<_>>();
    let z1 = CategoricalCovariate::from_codes("z1", lab("a", eta), (0..n).map(|i| i % eta).collect()).unwrap();
    let z2 = CategoricalCovariate::from_codes("z2", lab("b", phi), (0..n).map(|i| (i / eta) % phi).collect()).unwrap();
    FunctionalDataset::new(
        "y",
        (0..n).map(|i| format!("c{i}")).collect(),
        response,
        vec![FunctionalCovariate::new("x", sg, values).unwrap()],
        vec![z1, z2],
    )
    .unwrap()
}

/// Historical design by direct summation:
/// `Σ_r Δ(s_r) x_i(s_r) I{s_r ≤ t − δ} Φ^s_k(s_r) Φ^t_l(t)` in column `k K_t + l`.
pub fn brute_historical(ds: &FunctionalDataset, delta: f64, kx: usize, kt: usize, deg_x: usize, deg_t: usize) -> DMatrix<f64> {
    let x = &ds.functional[0];
    let s = x.grid.points();
    let w = trapezoid(s);
    let (tlo, thi) = ds.time_range();
    let mut out = DMatrix::zeros(ds.n_obs(), kx * kt);
    let mut row = 0;
    for (i, curve) in ds.response.iter().enumerate() {
        for &t in curve.grid.points() {
            let bt = basis_values(tlo, thi, kt, deg_t, t);
            for (ri, &sr) in s.iter().enumerate() {
                if sr > t - delta + 1e-12 {
                    continue;
                }
                let bs = basis_values(s[0], s[s.len() - 1], kx, deg_x, sr);
                for k in 0..kx {
                    for l in 0..kt {
                        out[(row, k * kt + l)] += w[ri] * x.values[(i, ri)] * bs[k] * bt[l];
                    }
                }
            }
            row += 1;
        }
    }
    out
}

/// `[C[cell(i), :] ⊗ base_row]` by loops.
pub fn brute_factor(cells: &[usize], c: &DMatrix<f64>, base: &DMatrix<f64>, ds: &FunctionalDataset) -> DMatrix<f64> {
    let off = ds.offsets();
    let q = c.ncols();
    let kb = base.ncols();
    let mut out = DMatrix::zeros(base.nrows(), q * kb);
    for i in 0..ds.n_curves() {
        for row in off[i]..off[i + 1] {
            for a in 0..q {
                for b in 0..kb {
                    out[(row, a * kb + b)] = c[(cells[i], a)] * base[(row, b)];
                }
            }
        }
    }
    out
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Read a positive integer from the environment, falling back to `default`.
pub fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).filter(|v| *v > 0).unwrap_or(default)
}
