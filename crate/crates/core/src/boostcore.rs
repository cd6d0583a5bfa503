//! Component-wise L2 boosting with penalized baselearners, curve-level
//! cross-validation for the stopping iteration, prediction and coefficient
//! surfaces.
//!
//! Fitting works in coefficient space. Every learner's design rows are
//! `C[cell, :] ⊗ b(i, t)`, so all quantities the algorithm needs (fits of
//! each learner to the current residuals, the selection criterion, risk) are
//! functions of the cross-products `BᵀWB`, `BᵀWy` and `yᵀWy`. These are
//! accumulated once per curve and base, then combined for any set of curve
//! weights. The iterations themselves never touch the `N` observations.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector, DVectorView};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselearners::{BaseLearner, BaseSpec, LearnerSpec};
use crate::error::{Error, Result};
use crate::fdgrid::FunctionalDataset;
use crate::linalg;
use crate::splines::bspline_design;

/// Pointwise loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    /// `½ (y − h)²`.
    #[default]
    SquaredError,
}

impl Loss {
    pub fn value(self, y: f64, h: f64) -> f64 {
        match self {
            Loss::SquaredError => 0.5 * (y - h) * (y - h),
        }
    }

    pub fn negative_gradient(self, y: f64, h: f64) -> f64 {
        match self {
            Loss::SquaredError => y - h,
        }
    }
}

fn check_fitted(ds: &FunctionalDataset, fitted: &[f64]) -> Result<()> {
    if fitted.len() != ds.n_obs() {
        return Err(Error::DimensionMismatch(format!(
            "{} fitted values for {} observations",
            fitted.len(),
            ds.n_obs()
        )));
    }
    if let Some(k) = fitted.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("fitted value at observation {k}")));
    }
    Ok(())
}

/// `n⁻¹ Σ_i w_i Σ_d Υ(t_{i,d}) ρ(y_i(t_{i,d}), h_i(t_{i,d}))`; missing responses
/// are skipped.
pub fn empirical_risk(
    ds: &FunctionalDataset,
    fitted: &[f64],
    loss: Loss,
    weights: &[f64],
    upsilon: &[f64],
) -> Result<f64> {
    check_fitted(ds, fitted)?;
    if weights.len() != ds.n_curves() || upsilon.len() != ds.n_obs() {
        return Err(Error::DimensionMismatch("risk weights".into()));
    }
    let off = ds.offsets();
    let mut total = 0.0;
    for (i, curve) in ds.response.iter().enumerate() {
        let mut s = 0.0;
        for (d, &y) in curve.values.iter().enumerate() {
            if y.is_finite() {
                let k = off[i] + d;
                s += upsilon[k] * loss.value(y, fitted[k]);
            }
        }
        total += weights[i] * s;
    }
    Ok(total / ds.n_curves() as f64)
}

/// Pseudo-residuals at every observation (0 where the response is missing).
pub fn negative_gradient(loss: Loss, ds: &FunctionalDataset, fitted: &[f64]) -> Result<Vec<f64>> {
    check_fitted(ds, fitted)?;
    Ok(ds
        .response
        .iter()
        .flat_map(|c| c.values.iter())
        .zip(fitted)
        .map(|(&y, &h)| if y.is_finite() { loss.negative_gradient(y, h) } else { 0.0 })
        .collect())
}

/// `argmin_ϑ Σ w (u − Bϑ)² + ϑᵀPϑ`. `obs_weights` are the products
/// `w_i Υ(t)`; `penalty` already includes `λ`.
pub fn fit_baselearner(
    design: &DMatrix<f64>,
    penalty: &DMatrix<f64>,
    u: &[f64],
    obs_weights: &[f64],
) -> Result<DVector<f64>> {
    if design.nrows() != u.len() || u.len() != obs_weights.len() || penalty.shape() != (design.ncols(), design.ncols()) {
        return Err(Error::DimensionMismatch("baselearner fit".into()));
    }
    let lhs = linalg::weighted_crossprod(design, obs_weights) + penalty;
    let rhs = linalg::weighted_xty(design, obs_weights, u);
    let penalized = linalg::max_abs(penalty) > 0.0;
    linalg::solve_sym(&lhs, &rhs, penalized)
}

/// Observation units for resampling.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResamplingUnit {
    #[default]
    Curve,
    /// All curves sharing a level of this categorical covariate.
    Factor(String),
}

/// Boosting and resampling settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostConfig {
    pub nu: f64,
    pub mstop: usize,
    /// Degrees of freedom shared by all learners.
    pub df: f64,
    /// Cross-validation folds; fewer than 2 disables early stopping.
    pub folds: usize,
    pub unit: ResamplingUnit,
    pub seed: u64,
    pub loss: Loss,
}

impl Default for BoostConfig {
    fn default() -> Self {
        Self { nu: 0.1, mstop: 1500, df: 4.0, folds: 10, unit: ResamplingUnit::Curve, seed: 1, loss: Loss::SquaredError }
    }
}

impl BoostConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("step length must be in (0, 1], got {}", self.nu)));
        }
        if self.mstop == 0 {
            return Err(Error::Config("mstop must be >= 1".into()));
        }
        if !(self.df > 0.0) {
            return Err(Error::Config(format!("df must be positive, got {}", self.df)));
        }
        if self.folds == 1 {
            return Err(Error::Config("cross-validation needs at least 2 folds".into()));
        }
        Ok(())
    }
}

/// Per-curve cross-products of every pair of distinct bases, with the
/// integration weights Υ included and curve weights left out.
#[derive(Debug, Clone)]
pub struct GramStore {
    bases: Vec<BaseSpec>,
    /// Base index of every learner.
    learner_base: Vec<usize>,
    /// `cross[i][pair(a, b)] = B_aᵀ Υ B_b` for curve `i`, `a ≤ b`.
    cross: Vec<Vec<DMatrix<f64>>>,
    rhs: Vec<Vec<DVector<f64>>>,
    yy: Vec<f64>,
}

fn pair_index(a: usize, b: usize, n: usize) -> usize {
    debug_assert!(a <= b);
    a * n - a * (a + 1) / 2 + b
}

impl GramStore {
    pub fn new(learners: &[BaseLearner], ds: &FunctionalDataset) -> Result<Self> {
        let mut bases: Vec<BaseSpec> = Vec::new();
        let mut learner_base = Vec::with_capacity(learners.len());
        for l in learners {
            let idx = match bases.iter().position(|b| *b == l.base) {
                Some(i) => i,
                None => {
                    bases.push(l.base.clone());
                    bases.len() - 1
                }
            };
            learner_base.push(idx);
        }
        let evals = bases.iter().map(|b| b.evaluator(ds)).collect::<Result<Vec<_>>>()?;
        let nb = bases.len();
        let per_curve = (0..ds.n_curves())
            .into_par_iter()
            .map(|i| {
                let curve = &ds.response[i];
                let ups: Vec<f64> = curve
                    .grid
                    .weights()
                    .iter()
                    .zip(&curve.values)
                    .map(|(w, v)| if v.is_finite() { *w } else { 0.0 })
                    .collect();
                let y: Vec<f64> = curve.values.iter().map(|v| if v.is_finite() { *v } else { 0.0 }).collect();
                let rows = evals.iter().map(|e| e.curve_rows(i)).collect::<Result<Vec<_>>>()?;
                let scaled: Vec<DMatrix<f64>> = rows
                    .iter()
                    .map(|r| {
                        let mut s = r.clone();
                        for (d, &u) in ups.iter().enumerate() {
                            s.row_mut(d).scale_mut(u);
                        }
                        s
                    })
                    .collect();
                let mut cross = Vec::with_capacity(nb * (nb + 1) / 2);
                for a in 0..nb {
                    for b in a..nb {
                        cross.push(scaled[a].transpose() * &rows[b]);
                    }
                }
                let yv = DVector::from_vec(y.clone());
                let rhs = scaled.iter().map(|s| s.tr_mul(&yv)).collect();
                let yy = y.iter().zip(&ups).map(|(v, u)| u * v * v).sum();
                Ok((cross, rhs, yy))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cross = Vec::with_capacity(per_curve.len());
        let mut rhs = Vec::with_capacity(per_curve.len());
        let mut yy = Vec::with_capacity(per_curve.len());
        for (c, r, y) in per_curve {
            cross.push(c);
            rhs.push(r);
            yy.push(y);
        }
        Ok(Self { bases, learner_base, cross, rhs, yy })
    }

    pub fn n_curves(&self) -> usize {
        self.yy.len()
    }

    /// Weighted cross-products of the stacked learner designs.
    pub fn assemble(&self, learners: &[BaseLearner], cells: &[Vec<usize>], weights: &[f64]) -> Result<Assembled> {
        if learners.len() != self.learner_base.len() || cells.len() != learners.len() {
            return Err(Error::DimensionMismatch("learners differ from the Gram store".into()));
        }
        if weights.len() != self.n_curves() {
            return Err(Error::DimensionMismatch("curve weights".into()));
        }
        let offsets = coefficient_offsets(learners);
        let p = *offsets.last().unwrap();
        let nb = self.bases.len();
        let mut gram = DMatrix::zeros(p, p);
        let mut rhs = DVector::zeros(p);
        let active: Vec<usize> = (0..self.n_curves()).filter(|&i| weights[i] > 0.0).collect();
        let yy = active.iter().map(|&i| weights[i] * self.yy[i]).sum();
        for (j, lj) in learners.iter().enumerate() {
            let a = self.learner_base[j];
            let ka = self.bases[a].dim();
            let mut by_cell: BTreeMap<usize, DVector<f64>> = BTreeMap::new();
            for &i in &active {
                let e = by_cell.entry(cells[j][i]).or_insert_with(|| DVector::zeros(ka));
                e.axpy(weights[i], &self.rhs[i][a], 1.0);
            }
            for (c, r) in by_cell {
                for q in 0..lj.n_levels_coef() {
                    let w = lj.transform[(c, q)];
                    if w != 0.0 {
                        let mut seg = rhs.rows_mut(offsets[j] + q * ka, ka);
                        seg.axpy(w, &r, 1.0);
                    }
                }
            }
            for (k, lk) in learners.iter().enumerate().skip(j) {
                let b = self.learner_base[k];
                let kb = self.bases[b].dim();
                let (lo, hi, swap) = if a <= b { (a, b, false) } else { (b, a, true) };
                let pi = pair_index(lo, hi, nb);
                let mut by_pair: BTreeMap<(usize, usize), DMatrix<f64>> = BTreeMap::new();
                for &i in &active {
                    let e = by_pair.entry((cells[j][i], cells[k][i])).or_insert_with(|| DMatrix::zeros(ka, kb));
                    let s = &self.cross[i][pi];
                    if swap {
                        e.zip_apply(&s.transpose(), |x, y| *x += weights[i] * y);
                    } else {
                        e.zip_apply(s, |x, y| *x += weights[i] * y);
                    }
                }
                for ((cj, ck), s) in by_pair {
                    for qj in 0..lj.n_levels_coef() {
                        let wj = lj.transform[(cj, qj)];
                        if wj == 0.0 {
                            continue;
                        }
                        for qk in 0..lk.n_levels_coef() {
                            let wk = lk.transform[(ck, qk)];
                            if wk == 0.0 {
                                continue;
                            }
                            let mut blk = gram.view_mut((offsets[j] + qj * ka, offsets[k] + qk * kb), (ka, kb));
                            blk.zip_apply(&s, |x, y| *x += wj * wk * y);
                        }
                    }
                }
            }
        }
        for j in 0..learners.len() {
            for k in j + 1..learners.len() {
                let (rj, nj) = (offsets[j], offsets[j + 1] - offsets[j]);
                let (rk, nk) = (offsets[k], offsets[k + 1] - offsets[k]);
                let upper = gram.view((rj, rk), (nj, nk)).transpose();
                gram.view_mut((rk, rj), (nk, nj)).copy_from(&upper);
            }
        }
        let diag_sym: Vec<(usize, usize)> = (0..learners.len()).map(|j| (offsets[j], offsets[j + 1] - offsets[j])).collect();
        for (o, n) in diag_sym {
            let blk = linalg::symmetrize(&gram.view((o, o), (n, n)).into_owned());
            gram.view_mut((o, o), (n, n)).copy_from(&blk);
        }
        Ok(Assembled { gram, rhs, yy, n_units: active.len(), offsets })
    }
}

/// Start of each learner's coefficients in the stacked vector, plus the total.
pub fn coefficient_offsets(learners: &[BaseLearner]) -> Vec<usize> {
    let mut off = vec![0];
    for l in learners {
        off.push(off.last().unwrap() + l.n_coef());
    }
    off
}

/// Stacked cross-products `G = BᵀWB`, `b = BᵀWy`, `c = yᵀWy`.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub gram: DMatrix<f64>,
    pub rhs: DVector<f64>,
    pub yy: f64,
    /// Number of curves with positive weight.
    pub n_units: usize,
    pub offsets: Vec<usize>,
}

impl Assembled {
    pub fn block(&self, j: usize) -> DMatrix<f64> {
        let (o, n) = (self.offsets[j], self.offsets[j + 1] - self.offsets[j]);
        self.gram.view((o, o), (n, n)).into_owned()
    }

    /// `self − other`, used for training folds.
    pub fn minus(&self, other: &Assembled) -> Assembled {
        Assembled {
            gram: &self.gram - &other.gram,
            rhs: &self.rhs - &other.rhs,
            yy: self.yy - other.yy,
            n_units: self.n_units - other.n_units,
            offsets: self.offsets.clone(),
        }
    }
}

/// Output of one boosting run in coefficient space.
#[derive(Debug, Clone)]
pub struct Run {
    pub selection: Vec<usize>,
    /// In-sample risk for `m = 0..=mstop`.
    pub risk: Vec<f64>,
    /// Held-out risk for `m = 0..=mstop`, when a held-out set was given.
    pub holdout_risk: Option<Vec<f64>>,
    /// `(m, θ^{[m]})` at the requested iterations.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

/// Per-learner step operator `A = (G + λP)⁻¹` and selection form
/// `H = A G A − 2A`, dense or as diagonal blocks for block-diagonal
/// learners.
enum Solver {
    Dense { a: DMatrix<f64>, h: DMatrix<f64> },
    Blocks { size: usize, a: Vec<DMatrix<f64>>, h: Vec<DMatrix<f64>> },
}

impl Solver {
    fn new(g: &DMatrix<f64>, pen: &DMatrix<f64>, name: &str) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let lhs = linalg::symmetrize(&(g + pen));
        let a = match linalg::spd_inverse(&lhs) {
            Some(inv) => inv,
            None if linalg::max_abs(pen) > 0.0 => linalg::pinv_sym(&lhs, 1e-12),
            None => {
                return Err(Error::RankDeficient(format!("unpenalized effect '{name}' has a singular design")))
            }
        };
        let h = &a * g * &a - &a * 2.0;
        Ok((a, h))
    }

    /// `gᵀ H g`, the decrease in SSE is its negative.
    fn score(&self, g: DVectorView<f64>) -> f64 {
        match self {
            Solver::Dense { h, .. } => g.dot(&(h * g)),
            Solver::Blocks { size, h, .. } => {
                h.iter().enumerate().map(|(c, hc)| {
                    let gc = g.rows(c * size, *size);
                    gc.dot(&(hc * gc))
                })
                .sum()
            }
        }
    }

    fn step(&self, g: DVectorView<f64>) -> DVector<f64> {
        match self {
            Solver::Dense { a, .. } => a * g,
            Solver::Blocks { size, a, .. } => {
                let mut out = DVector::zeros(g.len());
                for (c, ac) in a.iter().enumerate() {
                    out.rows_mut(c * size, *size).copy_from(&(ac * g.rows(c * size, *size)));
                }
                out
            }
        }
    }
}

fn learner_solvers(train: &Assembled, learners: &[BaseLearner]) -> Result<Vec<Solver>> {
    learners
        .par_iter()
        .enumerate()
        .map(|(j, l)| {
            let g = train.block(j);
            if l.is_blockwise() {
                let kb = l.base.dim();
                let base_pen = l.base.penalty()?;
                let pc = l.cell_penalty();
                let ident = DMatrix::<f64>::identity(kb, kb);
                let (mut a, mut h) = (Vec::new(), Vec::new());
                for c in 0..l.n_cells() {
                    let gc = g.view((c * kb, c * kb), (kb, kb)).into_owned();
                    let pen = (&ident * pc[(c, c)] + &base_pen) * l.lambda;
                    let (ac, hc) = Solver::new(&gc, &pen, &l.name)?;
                    a.push(ac);
                    h.push(hc);
                }
                return Ok(Solver::Blocks { size: kb, a, h });
            }
            let (a, h) = Solver::new(&g, &l.penalty()?, &l.name)?;
            Ok(Solver::Dense { a, h })
        })
        .collect()
}

/// Steps 1–5 in coefficient space: start from θ = 0, at each iteration fit
/// every learner to the current residuals, pick the one with the smallest
/// residual sum of squares (ties to the lowest index) and add `ν` times its
/// fit.
pub fn boost_assembled(
    train: &Assembled,
    learners: &[BaseLearner],
    nu: f64,
    mstop: usize,
    holdout: Option<&Assembled>,
    snapshot_at: &[usize],
) -> Result<Run> {
    let solvers = learner_solvers(train, learners)?;
    let off = &train.offsets;
    let p = *off.last().unwrap();
    let n = train.n_units.max(1) as f64;
    let mut theta = DVector::<f64>::zeros(p);
    let mut g = train.rhs.clone();
    let mut sse = train.yy;
    let mut risk = Vec::with_capacity(mstop + 1);
    risk.push(0.5 * sse / n);
    let mut hold = holdout.map(|h| (h.rhs.clone(), h.yy, h.n_units.max(1) as f64));
    let mut holdout_risk = hold.as_ref().map(|(_, yy, nh)| vec![0.5 * yy / nh]);
    let mut selection = Vec::with_capacity(mstop);
    let mut snapshots = Vec::new();
    if snapshot_at.contains(&0) {
        snapshots.push((0, theta.as_slice().to_vec()));
    }
    for m in 1..=mstop {
        let mut best = (f64::INFINITY, usize::MAX);
        for (j, s) in solvers.iter().enumerate() {
            let score = s.score(g.rows(off[j], off[j + 1] - off[j]));
            if score < best.0 {
                best = (score, j);
            }
        }
        let j = best.1;
        if j == usize::MAX {
            return Err(Error::NonFinite(format!("selection criterion at iteration {m}")));
        }
        let (o, q) = (off[j], off[j + 1] - off[j]);
        let step = solvers[j].step(g.rows(o, q)) * nu;
        let col = train.gram.columns(o, q) * &step;
        sse += -2.0 * step.dot(&g.rows(o, q)) + step.dot(&col.rows(o, q));
        g -= &col;
        theta.rows_mut(o, q).add_assign(&step);
        if !sse.is_finite() {
            return Err(Error::NonFinite(format!("risk diverged at iteration {m}")));
        }
        risk.push(0.5 * sse / n);
        if let (Some((gh, yy, nh)), Some(h)) = (hold.as_mut(), holdout) {
            let colh = h.gram.columns(o, q) * &step;
            *yy += -2.0 * step.dot(&gh.rows(o, q)) + step.dot(&colh.rows(o, q));
            *gh -= &colh;
            holdout_risk.as_mut().unwrap().push(0.5 * *yy / *nh);
        }
        selection.push(j);
        if snapshot_at.contains(&m) {
            snapshots.push((m, theta.as_slice().to_vec()));
        }
    }
    Ok(Run { selection, risk, holdout_risk, snapshots })
}

/// Fold index of every curve. Units (curves, or levels of a subject factor)
/// are shuffled with the seed; curve units are then ordered by their
/// categorical cell so that every fold receives a share of each cell.
pub fn make_folds(ds: &FunctionalDataset, unit: &ResamplingUnit, folds: usize, seed: u64) -> Result<Vec<usize>> {
    let n = ds.n_curves();
    let (unit_of, n_units, strata): (Vec<usize>, usize, Vec<Vec<usize>>) = match unit {
        ResamplingUnit::Curve => {
            let strata = (0..n).map(|i| ds.categorical.iter().map(|c| c.codes[i]).collect()).collect();
            ((0..n).collect(), n, strata)
        }
        ResamplingUnit::Factor(name) => {
            let z = ds.categorical(name)?;
            (z.codes.clone(), z.n_levels(), vec![Vec::new(); z.n_levels()])
        }
    };
    let mut order: Vec<usize> = (0..n_units).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by(|a, b| strata[*a].cmp(&strata[*b]));
    let mut unit_fold = vec![0; n_units];
    for (pos, &u) in order.iter().enumerate() {
        unit_fold[u] = pos % folds;
    }
    let fold: Vec<usize> = unit_of.iter().map(|&u| unit_fold[u]).collect();
    for f in 0..folds {
        if !fold.iter().zip(&ds.weights).any(|(&k, &w)| k == f && w > 0.0) {
            return Err(Error::EmptyFold(f));
        }
    }
    Ok(fold)
}

/// Cross-validated risk path and the stopping iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mstar: usize,
    /// Mean held-out risk for `m = 0..=mstop`.
    pub cv_risk: Vec<f64>,
    pub fold_risk: Vec<Vec<f64>>,
}

/// Index of the smallest mean held-out risk among `m = 1..=mstop`.
pub fn argmin_mstop(cv_risk: &[f64]) -> usize {
    let mut best = 1;
    for m in 2..cv_risk.len() {
        if cv_risk[m] < cv_risk[best] {
            best = m;
        }
    }
    best
}

/// A learner set prepared on one dataset.
pub struct Prepared<'a> {
    pub ds: &'a FunctionalDataset,
    pub learners: Vec<BaseLearner>,
    pub store: GramStore,
}

impl<'a> Prepared<'a> {
    pub fn new(ds: &'a FunctionalDataset, specs: &[LearnerSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("at least one effect is required".into()));
        }
        let learners = specs.iter().map(|s| BaseLearner::build(s, ds)).collect::<Result<Vec<_>>>()?;
        let store = GramStore::new(&learners, ds)?;
        Ok(Self { ds, learners, store })
    }

    /// Learners with constraints and `λ` set for the given curve weights.
    pub fn calibrated(&self, weights: &[f64], df: f64) -> Result<(Vec<BaseLearner>, Vec<Vec<usize>>, Assembled)> {
        let mut learners = self.learners.clone();
        for l in &mut learners {
            l.set_weights(self.ds, weights)?;
        }
        let cells = learners.iter().map(|l| l.cell_codes(self.ds)).collect::<Result<Vec<_>>>()?;
        let full = self.store.assemble(&learners, &cells, weights)?;
        for (j, l) in learners.iter_mut().enumerate() {
            l.calibrate(&full.block(j), df)?;
        }
        Ok((learners, cells, full))
    }

    /// Cross-validation over resampling units with fixed learners.
    pub fn cross_validate(
        &self,
        learners: &[BaseLearner],
        cells: &[Vec<usize>],
        full: &Assembled,
        weights: &[f64],
        config: &BoostConfig,
    ) -> Result<CvResult> {
        let wds;
        let ds = if weights == self.ds.weights.as_slice() {
            self.ds
        } else {
            wds = self.ds.with_weights(weights.to_vec())?;
            &wds
        };
        let fold = make_folds(ds, &config.unit, config.folds, config.seed)?;
        let fold_risk = (0..config.folds)
            .into_par_iter()
            .map(|f| {
                let hw: Vec<f64> = weights.iter().zip(&fold).map(|(&w, &k)| if k == f { w } else { 0.0 }).collect();
                let hold = self.store.assemble(learners, cells, &hw)?;
                let train = full.minus(&hold);
                let run = boost_assembled(&train, learners, config.nu, config.mstop, Some(&hold), &[])?;
                Ok(run.holdout_risk.expect("held-out set given"))
            })
            .collect::<Result<Vec<_>>>()?;
        let k = fold_risk.len() as f64;
        let cv_risk: Vec<f64> = (0..=config.mstop).map(|m| fold_risk.iter().map(|r| r[m]).sum::<f64>() / k).collect();
        Ok(CvResult { mstar: argmin_mstop(&cv_risk), cv_risk, fold_risk })
    }

    /// Full pipeline for one set of curve weights: constraints, `λ`
    /// calibration, cross-validated `m*`, final fit.
    pub fn fit_weighted(&self, weights: &[f64], config: &BoostConfig) -> Result<BoostModel> {
        config.validate()?;
        let (learners, cells, full) = self.calibrated(weights, config.df)?;
        let cv = if config.folds >= 2 {
            Some(self.cross_validate(&learners, &cells, &full, weights, config)?)
        } else {
            None
        };
        let mstar = cv.as_ref().map_or(config.mstop, |c| c.mstar);
        let run = boost_assembled(&full, &learners, config.nu, config.mstop, None, &[mstar, config.mstop])?;
        let snap = |m: usize| run.snapshots.iter().find(|(k, _)| *k == m).map(|(_, t)| t.clone()).unwrap();
        Ok(BoostModel {
            schema_version: MODEL_SCHEMA_VERSION,
            response: self.ds.response_name.clone(),
            offsets: full.offsets.clone(),
            theta: snap(mstar),
            theta_mstop: snap(config.mstop),
            learners,
            config: config.clone(),
            mstar,
            selection: run.selection,
            risk: run.risk,
            cv_risk: cv.map(|c| c.cv_risk),
        })
    }

    pub fn fit(&self, config: &BoostConfig) -> Result<BoostModel> {
        self.fit_weighted(&self.ds.weights, config)
    }
}

/// Stopping iteration by curve-level cross-validation.
pub fn select_mstop(ds: &FunctionalDataset, specs: &[LearnerSpec], config: &BoostConfig) -> Result<CvResult> {
    config.validate()?;
    if config.folds < 2 {
        return Err(Error::Config("cross-validation needs at least 2 folds".into()));
    }
    let prep = Prepared::new(ds, specs)?;
    let (learners, cells, full) = prep.calibrated(&ds.weights, config.df)?;
    prep.cross_validate(&learners, &cells, &full, &ds.weights, config)
}

/// Fit the model: calibrate all learners to the common df, choose `m*` by
/// cross-validation and refit on all curves.
pub fn boost(ds: &FunctionalDataset, specs: &[LearnerSpec], config: &BoostConfig) -> Result<BoostModel> {
    Prepared::new(ds, specs)?.fit(config)
}

pub const MODEL_SCHEMA_VERSION: u32 = 1;

/// A fitted model; self-contained for prediction on new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoostModel {
    pub schema_version: u32,
    pub response: String,
    pub learners: Vec<BaseLearner>,
    pub offsets: Vec<usize>,
    pub config: BoostConfig,
    pub mstar: usize,
    /// Coefficients at `m*`.
    pub theta: Vec<f64>,
    /// Coefficients at `mstop`.
    pub theta_mstop: Vec<f64>,
    /// Selected learner at every iteration up to `mstop`.
    pub selection: Vec<usize>,
    /// In-sample risk for `m = 0..=mstop`.
    pub risk: Vec<f64>,
    pub cv_risk: Option<Vec<f64>>,
}

/// Total and per-effect predictions at every observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub total: Vec<f64>,
    pub contributions: Vec<Vec<f64>>,
}

/// Values of one estimated surface (or curve) per level on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSurface {
    pub effect: String,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    /// Empty label for an effect without factors.
    pub levels: Vec<String>,
    /// One `|s| × |t|` matrix per level.
    pub values: Vec<DMatrix<f64>>,
    /// Whether `(s, t)` lies inside the integration limits.
    pub identified: DMatrix<bool>,
}

impl CoefficientSurface {
    pub fn level(&self, label: &str) -> Option<&DMatrix<f64>> {
        self.levels.iter().position(|l| l == label).map(|k| &self.values[k])
    }
}

impl BoostModel {
    pub fn n_learners(&self) -> usize {
        self.learners.len()
    }

    pub fn learner_index(&self, name: &str) -> Result<usize> {
        self.learners
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn coefficients(&self, j: usize) -> &[f64] {
        &self.theta[self.offsets[j]..self.offsets[j + 1]]
    }

    /// How often each learner was selected in the first `m*` iterations.
    pub fn selection_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.learners.len()];
        for &j in &self.selection[..self.mstar] {
            c[j] += 1;
        }
        c
    }

    /// Copy with a zero coefficient vector.
    pub fn zeroed(&self) -> Self {
        let mut m = self.clone();
        m.theta.iter_mut().for_each(|v| *v = 0.0);
        m
    }

    pub fn predict(&self, ds: &FunctionalDataset) -> Result<Prediction> {
        let n_obs = ds.n_obs();
        let off = ds.offsets();
        let contributions = self
            .learners
            .iter()
            .enumerate()
            .map(|(j, l)| {
                let cells = l.cell_codes(ds)?;
                let coef = l.cell_coefficients(self.coefficients(j));
                let eval = l.base.evaluator(ds)?;
                let mut out = vec![0.0; n_obs];
                for i in 0..ds.n_curves() {
                    let beta = &coef[cells[i]];
                    if beta.iter().all(|v| *v == 0.0) {
                        continue;
                    }
                    let rows = eval.curve_rows(i)?;
                    let v = rows * DVector::from_column_slice(beta);
                    out[off[i]..off[i + 1]].copy_from_slice(v.as_slice());
                }
                Ok(out)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = vec![0.0; n_obs];
        for c in &contributions {
            for (t, v) in total.iter_mut().zip(c) {
                *t += v;
            }
        }
        Ok(Prediction { total, contributions })
    }

    /// `β̂_j(s, t)` per cell on the grid `s × t`.
    pub fn coefficient_surface(&self, j: usize, s: &[f64], t: &[f64]) -> Result<CoefficientSurface> {
        let l = self.learners.get(j).ok_or_else(|| Error::InvalidInput(format!("no effect {j}")))?;
        let BaseSpec::History { limits, s_basis, t_basis, .. } = &l.base else {
            return Err(Error::InvalidInput(format!("effect '{}' is not historical", l.name)));
        };
        let phi_s = bspline_design(s_basis, s)?;
        let phi_t = bspline_design(t_basis, t)?;
        let (kx, kt) = (s_basis.dim(), t_basis.dim());
        let values = l
            .cell_coefficients(self.coefficients(j))
            .into_iter()
            .map(|c| {
                let b = DMatrix::from_row_slice(kx, kt, &c);
                &phi_s * b * phi_t.transpose()
            })
            .collect();
        let s0 = s_basis.lower();
        let scale = s_basis.upper() - s0;
        let identified = DMatrix::from_fn(s.len(), t.len(), |a, b| limits.contains(s[a], t[b], s0, scale));
        Ok(CoefficientSurface {
            effect: l.name.clone(),
            s: s.to_vec(),
            t: t.to_vec(),
            levels: (0..l.n_cells()).map(|c| l.cell_label(c)).collect(),
            values,
            identified,
        })
    }

    /// `γ̂_j(t)` per cell for an effect without a functional covariate.
    pub fn effect_curves(&self, j: usize, t: &[f64]) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
        let l = self.learners.get(j).ok_or_else(|| Error::InvalidInput(format!("no effect {j}")))?;
        let BaseSpec::Time { t_basis, .. } = &l.base else {
            return Err(Error::InvalidInput(format!("effect '{}' is historical", l.name)));
        };
        let phi = bspline_design(t_basis, t)?;
        let curves = l
            .cell_coefficients(self.coefficients(j))
            .into_iter()
            .map(|c| (&phi * DVector::from_vec(c)).as_slice().to_vec())
            .collect();
        Ok(((0..l.n_cells()).map(|c| l.cell_label(c)).collect(), curves))
    }
}
