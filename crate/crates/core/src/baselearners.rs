//! Design matrices and penalties for the partial-effect families: smooth
//! intercept, time-varying categorical and random effects, and the
//! historical effects with their factor-specific, random and
//! doubly-varying extensions.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdgrid::{CategoricalCovariate, FunctionalCovariate, FunctionalDataset, HistoryLimits};
use crate::linalg::{self, kron};
use crate::splines::{
    bspline_design, difference_penalty, double_sum_to_zero_transform, sum_to_zero_transform,
    DrSpectrum, MarginalBasis,
};

/// Row `i` of the result is `a[i,:] ⊗ b[i,:]`.
pub fn rowwise_tensor(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != b.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "row-wise tensor of {} and {} rows",
            a.nrows(),
            b.nrows()
        )));
    }
    let (ka, kb) = (a.ncols(), b.ncols());
    let mut out = DMatrix::zeros(a.nrows(), ka * kb);
    for p in 0..ka {
        for q in 0..kb {
            let col = a.column(p).component_mul(&b.column(q));
            out.set_column(p * kb + q, &col);
        }
    }
    Ok(out)
}

/// Precomputed pieces for the covariate part of a historical design:
/// `Δ(s_r) Φ^s_k(s_r)` on the covariate grid.
#[derive(Debug, Clone)]
pub struct HistoryIntegrator {
    points: Vec<f64>,
    weighted_phi: DMatrix<f64>,
    limits: HistoryLimits,
}

impl HistoryIntegrator {
    pub fn new(x: &FunctionalCovariate, limits: HistoryLimits, s_basis: &MarginalBasis) -> Result<Self> {
        limits.validate()?;
        let phi = bspline_design(s_basis, x.grid.points())?;
        let mut weighted_phi = phi;
        for (r, &w) in x.grid.weights().iter().enumerate() {
            weighted_phi.row_mut(r).scale_mut(w);
        }
        Ok(Self { points: x.grid.points().to_vec(), weighted_phi, limits })
    }

    /// `[Σ_r Δ(s_r) x(s_r) I{l(t) ≤ s_r ≤ u(t)} Φ^s_k(s_r)]_k`.
    pub fn row(&self, x: &[f64], t: f64) -> Vec<f64> {
        let s0 = self.points[0];
        let scale = self.points[self.points.len() - 1] - s0;
        let k = self.weighted_phi.ncols();
        let mut out = vec![0.0; k];
        for (r, &s) in self.points.iter().enumerate() {
            if x[r] == 0.0 || !self.limits.contains(s, t, s0, scale) {
                continue;
            }
            for (kk, o) in out.iter_mut().enumerate() {
                *o += x[r] * self.weighted_phi[(r, kk)];
            }
        }
        out
    }
}

/// Covariate part `B^x` (N × K_x) of a historical effect.
pub fn historical_marginal(
    x: &FunctionalCovariate,
    limits: &HistoryLimits,
    s_basis: &MarginalBasis,
    ds: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    let integ = HistoryIntegrator::new(x, *limits, s_basis)?;
    check_any_history(x, limits, ds)?;
    let mut out = DMatrix::zeros(ds.n_obs(), s_basis.dim());
    let mut row = 0;
    for (i, curve) in ds.response.iter().enumerate() {
        let xi = x.row(i);
        for &t in curve.grid.points() {
            let r = integ.row(&xi, t);
            for (k, v) in r.into_iter().enumerate() {
                out[(row, k)] = v;
            }
            row += 1;
        }
    }
    Ok(out)
}

fn check_any_history(x: &FunctionalCovariate, limits: &HistoryLimits, ds: &FunctionalDataset) -> Result<()> {
    let times: Vec<f64> = ds.obs_times();
    crate::fdgrid::check_history(&x.grid, limits, &times)
}

/// Historical design `B^x ⊙ B^t` (N × K_x K_t).
pub fn historical_design(
    x: &FunctionalCovariate,
    limits: &HistoryLimits,
    t_basis: &MarginalBasis,
    s_basis: &MarginalBasis,
    ds: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    let bx = historical_marginal(x, limits, s_basis, ds)?;
    let bt = bspline_design(t_basis, &ds.obs_times())?;
    rowwise_tensor(&bx, &bt)
}

fn check_lambda(l: f64) -> Result<()> {
    if !(l >= 0.0) || !l.is_finite() {
        return Err(Error::InvalidInput(format!("smoothing parameter must be >= 0, got {l}")));
    }
    Ok(())
}

fn check_square(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch(format!("{what} penalty is {:?}", m.shape())));
    }
    Ok(())
}

/// `λ_x (P_x ⊗ I) + λ_t (I ⊗ P_t)`.
pub fn kronecker_sum_penalty(
    p_x: &DMatrix<f64>,
    p_t: &DMatrix<f64>,
    lambda_x: f64,
    lambda_t: f64,
) -> Result<DMatrix<f64>> {
    check_square(p_x, "s-direction")?;
    check_square(p_t, "t-direction")?;
    check_lambda(lambda_x)?;
    check_lambda(lambda_t)?;
    let ix = DMatrix::identity(p_x.nrows(), p_x.nrows());
    let it = DMatrix::identity(p_t.nrows(), p_t.nrows());
    Ok(kron(p_x, &it) * lambda_x + kron(&ix, p_t) * lambda_t)
}

/// `λ_h (P_x ⊕ P_t)`.
pub fn isotropic_historical_penalty(p_x: &DMatrix<f64>, p_t: &DMatrix<f64>, lambda_h: f64) -> Result<DMatrix<f64>> {
    kronecker_sum_penalty(p_x, p_t, lambda_h, lambda_h)
}

/// `λ_z P_z ⊕ P_h` for a factor effect whose covariate-free part is already
/// scaled.
pub fn factor_penalty(p_z: &DMatrix<f64>, lambda_z: f64, p_h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_square(p_z, "factor")?;
    check_square(p_h, "historical")?;
    check_lambda(lambda_z)?;
    let iz = DMatrix::identity(p_z.nrows(), p_z.nrows());
    let ih = DMatrix::identity(p_h.nrows(), p_h.nrows());
    Ok(kron(p_z, &ih) * lambda_z + kron(&iz, p_h))
}

/// `(λ_z P_z ⊕ λ_z' P_z') ⊕ P_h` with cells ordered `e·φ + f`.
pub fn doubly_varying_penalty(
    p_z: &DMatrix<f64>,
    lambda_z: f64,
    p_z2: &DMatrix<f64>,
    lambda_z2: f64,
    p_h: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let cells = kronecker_sum_penalty(p_z, p_z2, lambda_z, lambda_z2)?;
    factor_penalty(&cells, 1.0, p_h)
}

/// Observation-level incidence matrix (N × η) of a categorical covariate.
pub fn incidence(z: &CategoricalCovariate, ds: &FunctionalDataset) -> DMatrix<f64> {
    let eta = z.n_levels();
    let mut out = DMatrix::zeros(ds.n_obs(), eta);
    let off = ds.offsets();
    for (i, &c) in z.codes.iter().enumerate() {
        for row in off[i]..off[i + 1] {
            out[(row, c)] = 1.0;
        }
    }
    out
}

/// Incidence of the cells of two categorical covariates (N × ηφ).
pub fn cell_incidence(z: &CategoricalCovariate, z2: &CategoricalCovariate, ds: &FunctionalDataset) -> DMatrix<f64> {
    let a = incidence(z, ds);
    let b = incidence(z2, ds);
    rowwise_tensor(&a, &b).expect("incidence matrices share the observation count")
}

/// Weighted curve counts per level (ψ), erroring on an empty level.
pub fn level_weights(z: &CategoricalCovariate, weights: &[f64]) -> Result<Vec<f64>> {
    let psi = z.weighted_psi(weights);
    if let Some(e) = psi.iter().position(|p| *p <= 0.0) {
        return Err(Error::EmptyLevel { factor: z.name.clone(), level: z.labels[e].clone() });
    }
    Ok(psi)
}

/// Weighted curve counts per cell, as an η × φ matrix.
pub fn cell_weights(z: &CategoricalCovariate, z2: &CategoricalCovariate, weights: &[f64]) -> DMatrix<f64> {
    let mut psi = DMatrix::zeros(z.n_levels(), z2.n_levels());
    for i in 0..weights.len() {
        psi[(z.codes[i], z2.codes[i])] += weights[i];
    }
    psi
}

/// `B^z ⊙ B_base`, with the incidence replaced by `incidence · Z` when
/// `constrained` (ψ-weighted sum-to-zero over levels).
pub fn factor_historical_design(
    z: &CategoricalCovariate,
    base: &DMatrix<f64>,
    constrained: bool,
    ds: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    let psi = level_weights(z, &ds.weights)?;
    let mut bz = incidence(z, ds);
    if constrained {
        bz = &bz * sum_to_zero_transform(&psi)?.z;
    }
    rowwise_tensor(&bz, base)
}

/// `(B^z ⊙ B^{z'}) ⊙ B_base`, optionally doubly constrained.
pub fn doubly_varying_design(
    z: &CategoricalCovariate,
    z2: &CategoricalCovariate,
    base: &DMatrix<f64>,
    constrained: bool,
    ds: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    let mut bz = cell_incidence(z, z2, ds);
    if constrained {
        let psi = cell_weights(z, z2, &ds.weights);
        bz = &bz * double_sum_to_zero_transform(&psi)?.z;
    }
    rowwise_tensor(&bz, base)
}

/// Which factors a time-varying effect depends on.
#[derive(Debug, Clone, Copy)]
pub enum TimeVaryingKind<'a> {
    Intercept,
    Categorical(&'a CategoricalCovariate),
    Interaction(&'a CategoricalCovariate, &'a CategoricalCovariate),
    RandomIntercept(&'a CategoricalCovariate),
}

/// Design of a smooth intercept or a time-varying categorical, interaction or
/// random effect.
pub fn time_varying_effect_design(
    kind: TimeVaryingKind<'_>,
    t_basis: &MarginalBasis,
    ds: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    let bt = bspline_design(t_basis, &ds.obs_times())?;
    match kind {
        TimeVaryingKind::Intercept => Ok(bt),
        TimeVaryingKind::Categorical(z) => factor_historical_design(z, &bt, true, ds),
        TimeVaryingKind::Interaction(z, z2) => doubly_varying_design(z, z2, &bt, true, ds),
        TimeVaryingKind::RandomIntercept(z) => rowwise_tensor(&incidence(z, ds), &bt),
    }
}

/// Main plus level effects estimated jointly as one unconstrained
/// factor-specific effect.
pub fn combined_parameterisation(
    z: &CategoricalCovariate,
    base: &DMatrix<f64>,
    ds: &FunctionalDataset,
) -> Result<DMatrix<f64>> {
    factor_historical_design(z, base, false, ds)
}

/// Per-level blocks of a factor-specific design: `blocks[e]` holds the rows of
/// the base design belonging to curves of level `e`.
#[derive(Debug, Clone)]
pub struct BlockDesign {
    pub blocks: Vec<DMatrix<f64>>,
    /// Observation indices (into the stacked design) of each block.
    pub rows: Vec<Vec<usize>>,
    /// Observation weights `w_i Υ(t)` of each block's rows.
    pub obs_weights: Vec<Vec<f64>>,
    /// Level constraint transform, when the effect is constrained.
    pub transform: Option<DMatrix<f64>>,
    n_obs: usize,
}

impl BlockDesign {
    pub fn new(
        z: &CategoricalCovariate,
        base: &DMatrix<f64>,
        obs_weights: &[f64],
        constrained: bool,
        ds: &FunctionalDataset,
    ) -> Result<Self> {
        if base.nrows() != ds.n_obs() || obs_weights.len() != ds.n_obs() {
            return Err(Error::DimensionMismatch("block design rows".into()));
        }
        let psi = level_weights(z, &ds.weights)?;
        let off = ds.offsets();
        let mut rows = vec![Vec::new(); z.n_levels()];
        for (i, &c) in z.codes.iter().enumerate() {
            rows[c].extend(off[i]..off[i + 1]);
        }
        let blocks = rows.iter().map(|r| base.select_rows(r)).collect();
        let w = rows.iter().map(|r| r.iter().map(|&k| obs_weights[k]).collect()).collect();
        let transform = if constrained { Some(sum_to_zero_transform(&psi)?.z) } else { None };
        Ok(Self { blocks, rows, obs_weights: w, transform, n_obs: ds.n_obs() })
    }

    pub fn base_dim(&self) -> usize {
        self.blocks[0].ncols()
    }

    /// Block-diagonal design with rows sorted by level.
    pub fn sorted_dense(&self) -> DMatrix<f64> {
        let kb = self.base_dim();
        let n: usize = self.blocks.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(n, kb * self.blocks.len());
        let mut r0 = 0;
        for (e, b) in self.blocks.iter().enumerate() {
            out.view_mut((r0, e * kb), b.shape()).copy_from(b);
            r0 += b.nrows();
        }
        match &self.transform {
            Some(z) => out * kron(z, &DMatrix::identity(kb, kb)),
            None => out,
        }
    }

    /// Dense design in the original observation order.
    pub fn dense(&self) -> DMatrix<f64> {
        let sorted = self.sorted_dense();
        let mut out = DMatrix::zeros(self.n_obs, sorted.ncols());
        let mut r0 = 0;
        for rows in &self.rows {
            for &k in rows {
                out.set_row(k, &sorted.row(r0));
                r0 += 1;
            }
        }
        out
    }

    /// Observation weights in the original order.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_obs];
        for (rows, w) in self.rows.iter().zip(&self.obs_weights) {
            for (&k, &v) in rows.iter().zip(w) {
                out[k] = v;
            }
        }
        out
    }
}

/// Smoothing parameter of a factor-specific effect with penalty
/// `λ (diag(level_penalty) ⊗ I + I ⊗ P_base)`, from per-level
/// decompositions. Constrained designs couple the blocks; they are handled
/// by the dense route.
pub fn blockwise_calibrate(
    bd: &BlockDesign,
    base_penalty: &DMatrix<f64>,
    level_penalty: &[f64],
    df_target: f64,
) -> Result<f64> {
    let kb = bd.base_dim();
    if base_penalty.shape() != (kb, kb) || level_penalty.len() != bd.blocks.len() {
        return Err(Error::DimensionMismatch("blockwise penalty".into()));
    }
    if let Some(z) = &bd.transform {
        log::warn!("constrained factor design: blockwise calibration falls back to the dense route");
        let design = bd.dense();
        let pz = z.transpose() * DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(level_penalty)) * z;
        let pen = factor_penalty(&pz, 1.0, base_penalty)?;
        return crate::splines::demmler_reinsch_lambda(&design, &pen, df_target, &bd.dense_weights());
    }
    let ident = DMatrix::<f64>::identity(kb, kb);
    let parts = bd
        .blocks
        .iter()
        .zip(&bd.obs_weights)
        .zip(level_penalty)
        .map(|((b, w), &pe)| {
            let gram = linalg::weighted_crossprod(b, w);
            DrSpectrum::from_gram(&gram, &(&ident * pe + base_penalty))
        })
        .collect::<Result<Vec<_>>>()?;
    DrSpectrum::union(parts).lambda_for_df(df_target)
}

/// Effect family of a baselearner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Intercept,
    TimeVarying,
    Interaction,
    RandomIntercept,
    Historical,
    FactorHistorical,
    RandomHistorical,
    DoublyVaryingHistorical,
}

impl Family {
    pub fn n_factors(self) -> usize {
        match self {
            Family::Intercept | Family::Historical => 0,
            Family::TimeVarying | Family::RandomIntercept | Family::FactorHistorical | Family::RandomHistorical => 1,
            Family::Interaction | Family::DoublyVaryingHistorical => 2,
        }
    }

    pub fn is_historical(self) -> bool {
        matches!(
            self,
            Family::Historical | Family::FactorHistorical | Family::RandomHistorical | Family::DoublyVaryingHistorical
        )
    }

    fn is_random(self) -> bool {
        matches!(self, Family::RandomIntercept | Family::RandomHistorical)
    }
}

/// How a factor-specific effect relates to the main effect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Deviations from a separate main effect, ψ-weighted sum-to-zero.
    #[default]
    Separated,
    /// Main plus deviation estimated as one unconstrained level surface.
    Combined,
}

/// Penalty across the levels of a factor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LevelPenalty {
    None,
    Ridge,
}

impl LevelPenalty {
    fn value(self) -> f64 {
        match self {
            LevelPenalty::None => 0.0,
            LevelPenalty::Ridge => 1.0,
        }
    }
}

/// Size of a marginal B-spline basis and the order of its difference penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BasisSize {
    pub n_basis: usize,
    pub degree: usize,
    pub penalty_order: usize,
}

impl BasisSize {
    pub const fn cubic(n_basis: usize, penalty_order: usize) -> Self {
        Self { n_basis, degree: 3, penalty_order }
    }
}

/// User-level description of one partial effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerSpec {
    pub name: String,
    pub family: Family,
    /// Functional covariate of a historical effect.
    pub covariate: Option<String>,
    /// Categorical covariates (0, 1 or 2 depending on the family).
    #[serde(default)]
    pub factors: Vec<String>,
    pub limits: Option<HistoryLimits>,
    pub s_basis: Option<BasisSize>,
    pub t_basis: Option<BasisSize>,
    #[serde(default)]
    pub mode: Mode,
    /// Per-factor level penalties; family defaults when absent.
    pub level_penalty: Option<Vec<LevelPenalty>>,
}

impl LearnerSpec {
    pub fn new(name: impl Into<String>, family: Family) -> Self {
        Self {
            name: name.into(),
            family,
            covariate: None,
            factors: Vec::new(),
            limits: None,
            s_basis: None,
            t_basis: None,
            mode: Mode::Separated,
            level_penalty: None,
        }
    }

    pub fn intercept() -> Self {
        Self::new("intercept", Family::Intercept)
    }

    pub fn historical(name: impl Into<String>, covariate: impl Into<String>, limits: HistoryLimits) -> Self {
        let mut s = Self::new(name, Family::Historical);
        s.covariate = Some(covariate.into());
        s.limits = Some(limits);
        s
    }

    pub fn with_factors<S: Into<String>>(mut self, factors: impl IntoIterator<Item = S>) -> Self {
        self.factors = factors.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_family(mut self, family: Family) -> Self {
        self.family = family;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_bases(mut self, s: Option<BasisSize>, t: Option<BasisSize>) -> Self {
        self.s_basis = s;
        self.t_basis = t;
        self
    }

    pub fn with_level_penalty(mut self, p: Vec<LevelPenalty>) -> Self {
        self.level_penalty = Some(p);
        self
    }

    /// Whether ψ-weighted sum-to-zero constraints are imposed over levels.
    pub fn constrained(&self) -> bool {
        match self.family {
            Family::Intercept | Family::Historical => false,
            Family::TimeVarying | Family::Interaction => true,
            Family::RandomIntercept | Family::RandomHistorical => false,
            Family::FactorHistorical | Family::DoublyVaryingHistorical => self.mode == Mode::Separated,
        }
    }

    fn resolved_level_penalty(&self) -> Vec<LevelPenalty> {
        if let Some(p) = &self.level_penalty {
            return p.clone();
        }
        match self.family {
            Family::Intercept | Family::Historical => vec![],
            Family::TimeVarying | Family::RandomIntercept | Family::RandomHistorical => vec![LevelPenalty::Ridge],
            Family::Interaction => vec![LevelPenalty::Ridge, LevelPenalty::Ridge],
            Family::FactorHistorical => match self.mode {
                Mode::Separated => vec![LevelPenalty::None],
                Mode::Combined => vec![LevelPenalty::Ridge],
            },
            Family::DoublyVaryingHistorical => vec![LevelPenalty::None, LevelPenalty::Ridge],
        }
    }

    fn resolved_t_basis(&self) -> BasisSize {
        self.t_basis.unwrap_or(match self.family {
            Family::DoublyVaryingHistorical => BasisSize::cubic(5, 1),
            f if f.is_historical() => BasisSize::cubic(8, 1),
            _ => BasisSize::cubic(8, 2),
        })
    }

    fn resolved_s_basis(&self) -> BasisSize {
        self.s_basis.unwrap_or(match self.family {
            Family::DoublyVaryingHistorical => BasisSize::cubic(5, 1),
            _ => BasisSize::cubic(8, 1),
        })
    }

    fn validate(&self) -> Result<()> {
        let nf = self.family.n_factors();
        if self.factors.len() != nf {
            return Err(Error::Config(format!(
                "effect '{}' ({:?}) needs {nf} categorical covariate(s), got {}",
                self.name,
                self.family,
                self.factors.len()
            )));
        }
        if self.family.is_historical() && (self.covariate.is_none() || self.limits.is_none()) {
            return Err(Error::Config(format!(
                "historical effect '{}' needs a covariate and integration limits",
                self.name
            )));
        }
        if self.resolved_level_penalty().len() != nf {
            return Err(Error::Config(format!("effect '{}': one level penalty per factor required", self.name)));
        }
        if self.family.is_random() && self.mode == Mode::Combined {
            return Err(Error::Config(format!("effect '{}': random effects have no combined mode", self.name)));
        }
        Ok(())
    }
}

/// The covariate-free part of a learner's design row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseSpec {
    /// `Φ^t(t)`.
    Time { t_basis: MarginalBasis, penalty_order: usize },
    /// `B^x(x_i, t) ⊗ Φ^t(t)`.
    History {
        covariate: String,
        limits: HistoryLimits,
        s_basis: MarginalBasis,
        t_basis: MarginalBasis,
        s_penalty_order: usize,
        t_penalty_order: usize,
    },
}

impl BaseSpec {
    pub fn dim(&self) -> usize {
        match self {
            BaseSpec::Time { t_basis, .. } => t_basis.dim(),
            BaseSpec::History { s_basis, t_basis, .. } => s_basis.dim() * t_basis.dim(),
        }
    }

    pub fn t_basis(&self) -> &MarginalBasis {
        match self {
            BaseSpec::Time { t_basis, .. } | BaseSpec::History { t_basis, .. } => t_basis,
        }
    }

    /// `P^t`, or the isotropic `P^x ⊕ P^t`.
    pub fn penalty(&self) -> Result<DMatrix<f64>> {
        match self {
            BaseSpec::Time { t_basis, penalty_order } => difference_penalty(t_basis.dim(), *penalty_order),
            BaseSpec::History { s_basis, t_basis, s_penalty_order, t_penalty_order, .. } => {
                let px = difference_penalty(s_basis.dim(), *s_penalty_order)?;
                let pt = difference_penalty(t_basis.dim(), *t_penalty_order)?;
                isotropic_historical_penalty(&px, &pt, 1.0)
            }
        }
    }

    /// Prepared evaluator for one dataset.
    pub fn evaluator<'a>(&'a self, ds: &'a FunctionalDataset) -> Result<BaseEvaluator<'a>> {
        let hist = match self {
            BaseSpec::Time { .. } => None,
            BaseSpec::History { covariate, limits, s_basis, .. } => {
                let x = ds.functional(covariate)?;
                check_any_history(x, limits, ds)?;
                Some((x, HistoryIntegrator::new(x, *limits, s_basis)?))
            }
        };
        Ok(BaseEvaluator { spec: self, ds, hist })
    }
}

/// Evaluates base rows curve by curve.
pub struct BaseEvaluator<'a> {
    spec: &'a BaseSpec,
    ds: &'a FunctionalDataset,
    hist: Option<(&'a FunctionalCovariate, HistoryIntegrator)>,
}

impl BaseEvaluator<'_> {
    /// `D_i × K_b` block of base rows for curve `i`.
    pub fn curve_rows(&self, i: usize) -> Result<DMatrix<f64>> {
        let times = self.ds.response[i].grid.points();
        let bt = bspline_design(self.spec.t_basis(), times)?;
        match &self.hist {
            None => Ok(bt),
            Some((x, integ)) => {
                let xi = x.row(i);
                let kt = bt.ncols();
                let kx = integ.weighted_phi.ncols();
                let mut out = DMatrix::zeros(times.len(), kx * kt);
                for (d, &t) in times.iter().enumerate() {
                    let bx = integ.row(&xi, t);
                    for (k, &v) in bx.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        for l in 0..kt {
                            out[(d, k * kt + l)] = v * bt[(d, l)];
                        }
                    }
                }
                Ok(out)
            }
        }
    }

    /// Full `N × K_b` base design.
    pub fn design(&self) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.ds.n_obs(), self.spec.dim());
        let off = self.ds.offsets();
        for i in 0..self.ds.n_curves() {
            let rows = self.curve_rows(i)?;
            out.view_mut((off[i], 0), rows.shape()).copy_from(&rows);
        }
        Ok(out)
    }
}

/// A categorical covariate as used by a learner: its name, level labels
/// (fixed at training time) and level penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorTerm {
    pub name: String,
    pub labels: Vec<String>,
    pub penalty: LevelPenalty,
}

impl FactorTerm {
    fn codes(&self, ds: &FunctionalDataset) -> Result<Vec<usize>> {
        let z = ds.categorical(&self.name)?;
        if z.labels == self.labels {
            return Ok(z.codes.clone());
        }
        z.codes
            .iter()
            .map(|&c| {
                let label = &z.labels[c];
                self.labels.iter().position(|l| l == label).ok_or_else(|| Error::UnknownLevel {
                    factor: self.name.clone(),
                    level: label.clone(),
                })
            })
            .collect()
    }
}

/// A baselearner: base rows `b(i, t)` combined with a level transform `C`,
/// giving design rows `C[cell(i), :] ⊗ b(i, t)`, and penalty
/// `λ (CᵀP^z C ⊗ I + I ⊗ P_base)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseLearner {
    pub name: String,
    pub family: Family,
    pub base: BaseSpec,
    pub factors: Vec<FactorTerm>,
    pub constrained: bool,
    /// `cells × q` level transform (`Z` when constrained, else identity).
    pub transform: DMatrix<f64>,
    /// Weighted curve counts per cell used for the constraints.
    pub psi: Vec<f64>,
    pub lambda: f64,
    pub df: f64,
}

impl BaseLearner {
    /// Build the learner from its spec on training data. `λ` is left at 0
    /// until calibrated.
    pub fn build(spec: &LearnerSpec, ds: &FunctionalDataset) -> Result<Self> {
        spec.validate()?;
        let (t_lo, t_hi) = ds.time_range();
        let tb = spec.resolved_t_basis();
        let t_basis = MarginalBasis::equidistant(t_lo, t_hi, tb.n_basis, tb.degree)?;
        let base = if spec.family.is_historical() {
            let cov = spec.covariate.as_ref().expect("validated");
            let x = ds.functional(cov)?;
            let sb = spec.resolved_s_basis();
            let s_basis = MarginalBasis::equidistant(x.grid.first(), x.grid.last(), sb.n_basis, sb.degree)?;
            BaseSpec::History {
                covariate: cov.clone(),
                limits: spec.limits.expect("validated"),
                s_basis,
                t_basis,
                s_penalty_order: sb.penalty_order,
                t_penalty_order: tb.penalty_order,
            }
        } else {
            BaseSpec::Time { t_basis, penalty_order: tb.penalty_order }
        };
        let penalties = spec.resolved_level_penalty();
        let factors = spec
            .factors
            .iter()
            .zip(&penalties)
            .map(|(f, &p)| {
                let z = ds.categorical(f)?;
                Ok(FactorTerm { name: f.clone(), labels: z.labels.clone(), penalty: p })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut learner = Self {
            name: spec.name.clone(),
            family: spec.family,
            base,
            factors,
            constrained: spec.constrained(),
            transform: DMatrix::identity(1, 1),
            psi: vec![],
            lambda: 0.0,
            df: 0.0,
        };
        learner.set_weights(ds, &ds.weights)?;
        Ok(learner)
    }

    /// Recompute ψ and the level transform for the given curve weights.
    pub fn set_weights(&mut self, ds: &FunctionalDataset, weights: &[f64]) -> Result<()> {
        let cells = self.cell_codes(ds)?;
        let n_cells = self.n_cells();
        let mut psi = vec![0.0; n_cells];
        for (&c, &w) in cells.iter().zip(weights) {
            psi[c] += w;
        }
        let needs_all_levels =
            self.constrained || self.factors.iter().all(|f| f.penalty == LevelPenalty::None);
        if !self.factors.is_empty() && needs_all_levels {
            if let Some(c) = psi.iter().position(|p| *p <= 0.0) {
                return Err(Error::EmptyLevel { factor: self.factor_names(), level: self.cell_label(c) });
            }
        }
        self.transform = match (self.constrained, self.factors.len()) {
            (true, 1) => sum_to_zero_transform(&psi)?.z,
            (true, 2) => {
                let eta = self.factors[0].labels.len();
                let phi = self.factors[1].labels.len();
                let m = DMatrix::from_fn(eta, phi, |e, f| psi[e * phi + f]);
                double_sum_to_zero_transform(&m)?.z
            }
            _ => DMatrix::identity(n_cells, n_cells),
        };
        self.psi = psi;
        Ok(())
    }

    fn factor_names(&self) -> String {
        self.factors.iter().map(|f| f.name.as_str()).collect::<Vec<_>>().join(":")
    }

    pub fn n_cells(&self) -> usize {
        self.factors.iter().map(|f| f.labels.len()).product()
    }

    /// Number of level columns `q` after the transform.
    pub fn n_levels_coef(&self) -> usize {
        self.transform.ncols()
    }

    pub fn n_coef(&self) -> usize {
        self.n_levels_coef() * self.base.dim()
    }

    pub fn cell_label(&self, c: usize) -> String {
        match self.factors.len() {
            0 => String::new(),
            1 => self.factors[0].labels[c].clone(),
            _ => {
                let phi = self.factors[1].labels.len();
                format!("{}:{}", self.factors[0].labels[c / phi], self.factors[1].labels[c % phi])
            }
        }
    }

    /// Cell index of every curve.
    pub fn cell_codes(&self, ds: &FunctionalDataset) -> Result<Vec<usize>> {
        let n = ds.n_curves();
        match self.factors.len() {
            0 => Ok(vec![0; n]),
            1 => self.factors[0].codes(ds),
            _ => {
                let a = self.factors[0].codes(ds)?;
                let b = self.factors[1].codes(ds)?;
                let phi = self.factors[1].labels.len();
                Ok(a.iter().zip(&b).map(|(e, f)| e * phi + f).collect())
            }
        }
    }

    /// `P^z` over cells.
    pub fn cell_penalty(&self) -> DMatrix<f64> {
        match self.factors.len() {
            0 => DMatrix::zeros(1, 1),
            1 => DMatrix::identity(self.n_cells(), self.n_cells()) * self.factors[0].penalty.value(),
            _ => {
                let e = self.factors[0].labels.len();
                let f = self.factors[1].labels.len();
                let pe = DMatrix::identity(e, e) * self.factors[0].penalty.value();
                let pf = DMatrix::identity(f, f) * self.factors[1].penalty.value();
                linalg::kron_sum(&pe, &pf)
            }
        }
    }

    /// Penalty with `λ = 1`.
    pub fn unit_penalty(&self) -> Result<DMatrix<f64>> {
        let pz = self.transform.transpose() * self.cell_penalty() * &self.transform;
        factor_penalty(&pz, 1.0, &self.base.penalty()?)
    }

    pub fn penalty(&self) -> Result<DMatrix<f64>> {
        Ok(self.unit_penalty()? * self.lambda)
    }

    /// Whether the Gram matrix is block diagonal over cells with penalty
    /// blocks `p_c I + P_base`.
    pub fn is_blockwise(&self) -> bool {
        !self.constrained && !self.factors.is_empty()
    }

    /// Dense `N × n_coef` design on a dataset.
    pub fn design(&self, ds: &FunctionalDataset) -> Result<DMatrix<f64>> {
        let eval = self.base.evaluator(ds)?;
        let cells = self.cell_codes(ds)?;
        let kb = self.base.dim();
        let q = self.n_levels_coef();
        let off = ds.offsets();
        let mut out = DMatrix::zeros(ds.n_obs(), q * kb);
        for i in 0..ds.n_curves() {
            let rows = eval.curve_rows(i)?;
            for p in 0..q {
                let c = self.transform[(cells[i], p)];
                if c == 0.0 {
                    continue;
                }
                out.view_mut((off[i], p * kb), rows.shape()).copy_from(&(&rows * c));
            }
        }
        Ok(out)
    }

    /// Demmler–Reinsch spectrum from this learner's weighted Gram matrix.
    pub fn spectrum(&self, gram: &DMatrix<f64>) -> Result<DrSpectrum> {
        let base_pen = self.base.penalty()?;
        if self.is_blockwise() {
            let kb = self.base.dim();
            let pc = self.cell_penalty();
            let ident = DMatrix::<f64>::identity(kb, kb);
            let parts = (0..self.n_cells())
                .map(|c| {
                    let block = gram.view((c * kb, c * kb), (kb, kb)).into_owned();
                    DrSpectrum::from_gram(&block, &(&ident * pc[(c, c)] + &base_pen))
                })
                .collect::<Result<Vec<_>>>()?;
            return Ok(DrSpectrum::union(parts));
        }
        DrSpectrum::from_gram(gram, &self.unit_penalty()?)
    }

    /// Set `λ` so that the learner has `df` degrees of freedom.
    pub fn calibrate(&mut self, gram: &DMatrix<f64>, df: f64) -> Result<()> {
        let spec = self.spectrum(gram)?;
        self.lambda = spec.lambda_for_df(df).map_err(|e| match e {
            Error::DfUnattainable { target, min, max } => {
                log::error!("effect '{}': df {target} outside ({min}, {max}]", self.name);
                e
            }
            other => other,
        })?;
        self.df = df;
        log::info!("effect '{}': lambda = {:.6e}, df = {df}", self.name, self.lambda);
        Ok(())
    }

    /// Coefficients of each cell's base surface, `Θᵀ C[cell, :]ᵀ`.
    pub fn cell_coefficients(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let kb = self.base.dim();
        let q = self.n_levels_coef();
        (0..self.n_cells())
            .map(|c| {
                let mut out = vec![0.0; kb];
                for p in 0..q {
                    let w = self.transform[(c, p)];
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &th) in out.iter_mut().zip(&theta[p * kb..(p + 1) * kb]) {
                        *o += w * th;
                    }
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdgrid::{ResponseCurve, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, r: usize, d: usize, seed: u64) -> FunctionalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sg = TimeGrid::equidistant(0.0, 1.0, r).unwrap();
        let tg = TimeGrid::equidistant(0.0, 1.0, d).unwrap();
        let x = DMatrix::from_fn(n, r, |_, _| rng.random_range(-1.0..1.0));
        let resp = (0..n)
            .map(|_| ResponseCurve { grid: tg.clone(), values: (0..d).map(|_| rng.random()).collect() })
            .collect();
        let labels: Vec<String> = (0..n).map(|i| ["a", "b"][i % 2].to_string()).collect();
        let labels2: Vec<String> = (0..n).map(|i| ["u", "v"][(i / 2) % 2].to_string()).collect();
        FunctionalDataset::new(
            "y",
            (0..n).map(|i| format!("c{i}")).collect(),
            resp,
            vec![FunctionalCovariate::new("x", sg, x).unwrap()],
            vec![
                CategoricalCovariate::from_labels("z", &labels).unwrap(),
                CategoricalCovariate::from_labels("w", &labels2).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn rowwise_tensor_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 2.0]);
        let b = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let t = rowwise_tensor(&a, &b).unwrap();
        assert_eq!(t.row(0).iter().cloned().collect::<Vec<_>>(), vec![3.0, 4.0, 6.0, 8.0]);
        let ones = DMatrix::from_element(1, 1, 1.0);
        assert_eq!(rowwise_tensor(&a, &ones).unwrap(), a);
        assert!(rowwise_tensor(&a, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn constant_bases_give_running_integrals() {
        let ds = dataset(2, 6, 6, 1);
        let b = MarginalBasis::new(vec![0.0, 1.0], 0).unwrap();
        let x = ds.functional("x").unwrap();
        let lim = HistoryLimits::Lead { delta: 0.0 };
        let m = historical_design(x, &lim, &b, &b, &ds).unwrap();
        let w = x.grid.weights();
        let s = x.grid.points();
        for i in 0..2 {
            for (d, &t) in ds.response[i].grid.points().iter().enumerate() {
                let want: f64 = (0..6).filter(|&r| s[r] <= t + 1e-12).map(|r| w[r] * x.values[(i, r)]).sum();
                assert!((m[(i * 6 + d, 0)] - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zero_covariate_gives_zero_design() {
        let mut ds = dataset(3, 6, 6, 2);
        ds.functional[0].values.fill(0.0);
        let b = MarginalBasis::equidistant(0.0, 1.0, 3, 2).unwrap();
        let m = historical_design(&ds.functional[0], &HistoryLimits::Lead { delta: 0.1 }, &b, &b, &ds).unwrap();
        assert!(m.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn empty_history_rejected() {
        let ds = dataset(2, 6, 6, 3);
        let b = MarginalBasis::equidistant(0.0, 1.0, 3, 2).unwrap();
        let r = historical_design(&ds.functional[0], &HistoryLimits::Lead { delta: 2.0 }, &b, &b, &ds);
        assert!(matches!(r, Err(Error::EmptyHistory)));
    }

    #[test]
    fn penalty_examples() {
        let i2 = DMatrix::<f64>::identity(2, 2);
        assert_eq!(kronecker_sum_penalty(&i2, &i2, 1.0, 1.0).unwrap(), DMatrix::identity(4, 4) * 2.0);
        assert_eq!(kronecker_sum_penalty(&i2, &i2, 0.0, 0.0).unwrap(), DMatrix::zeros(4, 4));
        assert!(kronecker_sum_penalty(&i2, &i2, -1.0, 0.0).is_err());
        let px = difference_penalty(2, 1).unwrap();
        let iso = isotropic_historical_penalty(&px, &px, 2.0).unwrap();
        assert_eq!(iso, kronecker_sum_penalty(&px, &px, 2.0, 2.0).unwrap());
        let f = factor_penalty(&i2, 1.0, &DMatrix::zeros(3, 3)).unwrap();
        assert_eq!(f, DMatrix::identity(6, 6));
    }

    #[test]
    fn factor_design_blocks_and_contrasts() {
        let ds = dataset(4, 6, 5, 4);
        let b = MarginalBasis::equidistant(0.0, 1.0, 3, 2).unwrap();
        let base = historical_design(&ds.functional[0], &HistoryLimits::Lead { delta: 0.0 }, &b, &b, &ds).unwrap();
        let z = ds.categorical("z").unwrap();
        let un = factor_historical_design(z, &base, false, &ds).unwrap();
        let kb = base.ncols();
        for i in 0..4 {
            let lvl = z.codes[i];
            for row in i * 5..(i + 1) * 5 {
                for e in 0..2 {
                    for k in 0..kb {
                        let want = if e == lvl { base[(row, k)] } else { 0.0 };
                        assert_eq!(un[(row, e * kb + k)], want);
                    }
                }
            }
        }
        let con = factor_historical_design(z, &base, true, &ds).unwrap();
        let s = 1.0 / 2f64.sqrt();
        let expect = (un.columns(0, kb) - un.columns(kb, kb)) * s;
        assert!((con - expect).abs().max() < 1e-14);
    }

    #[test]
    fn doubly_varying_constrained_is_interaction_contrast() {
        let ds = dataset(8, 6, 5, 5);
        let bt = MarginalBasis::equidistant(0.0, 1.0, 4, 3).unwrap();
        let z = ds.categorical("z").unwrap();
        let w = ds.categorical("w").unwrap();
        let d = time_varying_effect_design(TimeVaryingKind::Interaction(z, w), &bt, &ds).unwrap();
        assert_eq!(d.ncols(), 4);
        let base = bspline_design(&bt, &ds.obs_times()).unwrap();
        for i in 0..8 {
            let sign = if (z.codes[i] + w.codes[i]) % 2 == 0 { 0.5 } else { -0.5 };
            for row in i * 5..(i + 1) * 5 {
                for k in 0..4 {
                    assert!((d[(row, k)] - sign * base[(row, k)]).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn block_design_reproduces_dense() {
        let ds = dataset(6, 6, 5, 6);
        let b = MarginalBasis::equidistant(0.0, 1.0, 3, 2).unwrap();
        let base = historical_design(&ds.functional[0], &HistoryLimits::Lead { delta: 0.0 }, &b, &b, &ds).unwrap();
        let z = ds.categorical("z").unwrap();
        let w = ds.obs_integration_weights();
        let bd = BlockDesign::new(z, &base, &w, false, &ds).unwrap();
        assert_eq!(bd.dense(), factor_historical_design(z, &base, false, &ds).unwrap());
        let p = isotropic_historical_penalty(&difference_penalty(3, 1).unwrap(), &difference_penalty(3, 1).unwrap(), 1.0)
            .unwrap();
        let fast = blockwise_calibrate(&bd, &p, &[0.0, 0.0], 4.0).unwrap();
        let dense = crate::splines::demmler_reinsch_lambda(
            &bd.dense(),
            &factor_penalty(&DMatrix::zeros(2, 2), 1.0, &p).unwrap(),
            4.0,
            &w,
        )
        .unwrap();
        assert!((fast - dense).abs() <= 1e-6 * dense);
    }

    #[test]
    fn learner_design_matches_low_level_builders() {
        let ds = dataset(6, 6, 5, 7);
        let lim = HistoryLimits::Lead { delta: 0.1 };
        let spec = LearnerSpec::historical("h", "x", lim)
            .with_family(Family::FactorHistorical)
            .with_factors(["z"])
            .with_bases(Some(BasisSize::cubic(4, 1)), Some(BasisSize::cubic(4, 1)));
        let l = BaseLearner::build(&spec, &ds).unwrap();
        let BaseSpec::History { s_basis, t_basis, .. } = &l.base else { panic!() };
        let base = historical_design(&ds.functional[0], &lim, t_basis, s_basis, &ds).unwrap();
        let want = factor_historical_design(ds.categorical("z").unwrap(), &base, true, &ds).unwrap();
        assert!((l.design(&ds).unwrap() - want).abs().max() < 1e-14);
    }

    #[test]
    fn missing_level_errors_only_without_ridge() {
        let mut ds = dataset(4, 6, 5, 8);
        ds.weights = vec![1.0, 0.0, 1.0, 0.0];
        let fh = LearnerSpec::historical("h", "x", HistoryLimits::Lead { delta: 0.0 })
            .with_family(Family::FactorHistorical)
            .with_factors(["z"]);
        assert!(matches!(BaseLearner::build(&fh, &ds), Err(Error::EmptyLevel { .. })));
        let rh = fh.clone().with_family(Family::RandomHistorical);
        assert!(BaseLearner::build(&rh, &ds).is_ok());
    }
}
