//! Simulated functional data with known coefficient surfaces, plus the
//! reliMSE and signal-to-noise helpers used to score estimates.

use std::f64::consts::{PI, SQRT_2};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::baselearners::{BasisSize, Family, LearnerSpec, Mode};
use crate::boostcore::CoefficientSurface;
use crate::error::{Error, Result};
use crate::fdgrid::{
    CategoricalCovariate, FunctionalCovariate, FunctionalDataset, HistoryLimits, ResponseCurve, TimeGrid,
};
use crate::linalg::null_space;
use crate::splines::{bspline_design, double_sum_to_zero_transform, MarginalBasis};

/// Lead used by every simulated historical effect.
pub const SIM_DELTA: f64 = 0.025;
/// Threshold `a` of `Q_a(x) = x · I(x ≥ a)`.
pub const Q_THRESHOLD: f64 = 0.001;

pub const RESPONSE: &str = "y";
pub const COVARIATE: &str = "x";
pub const CONDITION: &str = "condition";
pub const SUBJECT: &str = "subject";

/// `Q_a(x)`.
pub fn threshold(x: f64, a: f64) -> f64 {
    if x >= a {
        x
    } else {
        0.0
    }
}

fn normal_density(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    (-0.5 * z * z).exp() / (sd * (2.0 * PI).sqrt())
}

/// `sin(10 |s − t|) cos(10 t)`.
pub fn multimodal(s: f64, t: f64) -> f64 {
    (10.0 * (s - t).abs()).sin() * (10.0 * t).cos()
}

/// `s / √2 · cos(π √t)`.
pub fn varpi(s: f64, t: f64) -> f64 {
    s / SQRT_2 * (PI * t.sqrt()).cos()
}

/// Closed form of a true coefficient surface, before masking.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum SurfaceForm {
    Multimodal,
    /// Multimodal surface restricted to `s ≥ t − lag` and `t ≤ t_max`.
    Band { lag: f64, t_max: f64 },
    /// `scale · ϖ(s, t)`.
    Varpi { scale: f64 },
    /// Tensor-product spline `Σ c_kl Φ_k(s) Φ_l(t)`.
    Spline { s_basis: MarginalBasis, t_basis: MarginalBasis, coef: Vec<f64> },
    /// `Q{sin(|t − s| + 10) cos(5 s)}`.
    ThresholdedWave,
    /// `scale · Q{φ(s) φ(t)}` with normal densities of mean `mean`, sd `sd`.
    ThresholdedBump { scale: f64, mean: f64, sd: f64 },
}

/// A true coefficient surface with its integration limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueSurface {
    #[serde(flatten)]
    pub form: SurfaceForm,
    pub limits: HistoryLimits,
}

impl TrueSurface {
    pub fn new(form: SurfaceForm) -> Self {
        Self { form, limits: HistoryLimits::Lead { delta: SIM_DELTA } }
    }

    /// Surface value ignoring the integration limits.
    pub fn raw(&self, s: f64, t: f64) -> f64 {
        match &self.form {
            SurfaceForm::Multimodal => multimodal(s, t),
            SurfaceForm::Band { lag, t_max } => {
                if s >= t - lag - 1e-12 && t <= t_max + 1e-12 {
                    multimodal(s, t)
                } else {
                    0.0
                }
            }
            SurfaceForm::Varpi { scale } => scale * varpi(s, t),
            SurfaceForm::Spline { s_basis, t_basis, coef } => {
                let a = s_basis.eval_row(s).expect("point inside basis range");
                let b = t_basis.eval_row(t).expect("point inside basis range");
                let kt = b.len();
                a.iter()
                    .enumerate()
                    .map(|(k, av)| av * b.iter().enumerate().map(|(l, bv)| coef[k * kt + l] * bv).sum::<f64>())
                    .sum()
            }
            SurfaceForm::ThresholdedWave => threshold(((t - s).abs() + 10.0).sin() * (5.0 * s).cos(), Q_THRESHOLD),
            SurfaceForm::ThresholdedBump { scale, mean, sd } => {
                scale * threshold(normal_density(s, *mean, *sd) * normal_density(t, *mean, *sd), Q_THRESHOLD)
            }
        }
    }

    pub fn in_region(&self, s: f64, t: f64) -> bool {
        self.limits.contains(s, t, 0.0, 1.0)
    }

    /// `β(s, t) · I{l(t) ≤ s ≤ u(t)}`.
    pub fn eval(&self, s: f64, t: f64) -> f64 {
        if self.in_region(s, t) {
            self.raw(s, t)
        } else {
            0.0
        }
    }

    pub fn grid(&self, s: &[f64], t: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(s.len(), t.len(), |a, b| self.eval(s[a], t[b]))
    }
}

/// True surfaces of one historical effect, one per level (a single unnamed
/// level for main effects).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueEffect {
    pub effect: String,
    pub family: Family,
    pub levels: Vec<String>,
    pub surfaces: Vec<TrueSurface>,
}

/// True time-varying curves of one effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCurves {
    pub effect: String,
    pub family: Family,
    pub levels: Vec<String>,
    pub basis: MarginalBasis,
    /// Spline coefficients per level.
    pub coef: Vec<Vec<f64>>,
}

impl TrueCurves {
    pub fn eval(&self, level: usize, t: f64) -> f64 {
        let row = self.basis.eval_row(t).expect("point inside basis range");
        row.iter().zip(&self.coef[level]).map(|(a, b)| a * b).sum()
    }
}

/// Simulation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Main multimodal historical effect.
    Multimodal,
    /// Band-restricted multimodal effect.
    Band,
    /// Main effect, time-varying categorical and factor-specific effect.
    Factor,
    /// Main effect, random intercept and random historical effect.
    Random,
    /// Factor and random terms together.
    FactorRandom,
    /// Main and factor-specific historical effects only.
    FactorHistorical,
    /// Main and random historical effects only.
    RandomHistorical,
    /// All of the above plus a doubly-varying historical effect.
    Full,
    /// Thresholded main effect with exact zero regions.
    BootstrapTruth,
    /// Thresholded main effect plus thresholded factor-specific multiples.
    BootstrapFactor,
}

impl Scenario {
    pub fn has_condition(self) -> bool {
        matches!(
            self,
            Scenario::Factor
                | Scenario::FactorRandom
                | Scenario::FactorHistorical
                | Scenario::Full
                | Scenario::BootstrapFactor
        )
    }

    pub fn has_subject(self) -> bool {
        matches!(self, Scenario::Random | Scenario::FactorRandom | Scenario::RandomHistorical | Scenario::Full)
    }

    /// Whether factor terms include a time-varying effect.
    pub fn has_time_varying(self) -> bool {
        !matches!(self, Scenario::FactorHistorical | Scenario::RandomHistorical | Scenario::BootstrapFactor)
    }
}

impl Scenario {
    pub const ALL: [Scenario; 10] = [
        Scenario::Multimodal,
        Scenario::Band,
        Scenario::Factor,
        Scenario::Random,
        Scenario::FactorRandom,
        Scenario::FactorHistorical,
        Scenario::RandomHistorical,
        Scenario::Full,
        Scenario::BootstrapTruth,
        Scenario::BootstrapFactor,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Multimodal => "multimodal",
            Scenario::Band => "band",
            Scenario::Factor => "factor",
            Scenario::Random => "random",
            Scenario::FactorRandom => "factor-random",
            Scenario::FactorHistorical => "factor-historical",
            Scenario::RandomHistorical => "random-historical",
            Scenario::Full => "full",
            Scenario::BootstrapTruth => "bootstrap-truth",
            Scenario::BootstrapFactor => "bootstrap-factor",
        }
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Scenario::ALL.iter().map(|sc| sc.name()).collect();
            Error::InvalidInput(format!("unknown scenario '{s}'; expected one of {}", names.join(", ")))
        })
    }
}

/// Parameters shared by all generators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    pub n: usize,
    /// Grid points per curve, shared by `s` and `t`.
    pub d: usize,
    /// `f64::INFINITY` gives noiseless data.
    pub snr: f64,
    /// Number of spline functions generating each covariate curve.
    pub kappa: usize,
    pub eta: usize,
    pub n_subject: usize,
    pub seed: u64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self { n: 160, d: 40, snr: 1.0, kappa: 11, eta: 4, n_subject: 10, seed: 1 }
    }
}

impl SimParams {
    fn validate(&self, scenario: Scenario) -> Result<()> {
        if self.n == 0 || self.d < 3 {
            return Err(Error::InvalidInput("need n >= 1 curves and D >= 3 grid points".into()));
        }
        if self.kappa < 2 || self.d < self.kappa {
            return Err(Error::InvalidInput(format!(
                "covariate basis needs 2 <= kappa <= D, got kappa={} D={}",
                self.kappa, self.d
            )));
        }
        if !(self.snr > 0.0) {
            return Err(Error::InvalidInput(format!("SNR must be positive, got {}", self.snr)));
        }
        if scenario.has_condition() && (self.eta < 2 || self.n < self.eta) {
            return Err(Error::InvalidInput("factor scenarios need eta >= 2 and n >= eta".into()));
        }
        if scenario.has_subject() && (self.n_subject < 2 || self.n < self.n_subject) {
            return Err(Error::InvalidInput("random scenarios need n_subject >= 2 and n >= n_subject".into()));
        }
        Ok(())
    }
}

/// A simulated dataset with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedDataset {
    pub scenario: Scenario,
    pub params: SimParams,
    pub dataset: FunctionalDataset,
    pub surfaces: Vec<TrueEffect>,
    pub curves: Vec<TrueCurves>,
    /// Noise-free linear predictor at every observation.
    pub linear_predictor: Vec<f64>,
    pub sigma: f64,
}

/// The truth sidecar: everything in [`SimulatedDataset`] except the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub scenario: Scenario,
    pub params: SimParams,
    pub surfaces: Vec<TrueEffect>,
    pub curves: Vec<TrueCurves>,
    pub sigma: f64,
}

impl SimulatedDataset {
    pub fn truth(&self) -> Truth {
        Truth {
            scenario: self.scenario,
            params: self.params.clone(),
            surfaces: self.surfaces.clone(),
            curves: self.curves.clone(),
            sigma: self.sigma,
        }
    }
}

const STREAM_COVARIATE: u64 = 1;
const STREAM_EFFECTS: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Spline basis used to draw covariate curves: `ϰ` B-splines of degree
/// `min(3, ϰ − 1)` on equidistant knots over `[0, 1]`; cubic draws satisfy
/// natural boundary conditions.
pub fn covariate_basis(kappa: usize) -> Result<MarginalBasis> {
    MarginalBasis::equidistant(0.0, 1.0, kappa, 3.min(kappa - 1))
}

/// `x_i(s) = Σ_k c_ik N_k(s)` with i.i.d. standard normal `c_ik` on an
/// equidistant grid of `r` points over `[0, 1]`.
pub fn gen_covariates(n: usize, r: usize, kappa: usize, seed: u64) -> Result<FunctionalCovariate> {
    if kappa < 2 || r < kappa {
        return Err(Error::InvalidInput(format!("need 2 <= kappa <= R, got kappa={kappa}, R={r}")));
    }
    let mut rng = rng_for(seed, STREAM_COVARIATE);
    let raw = DMatrix::from_fn(kappa, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let coef = match natural_projection(kappa) {
        Some(z) => &z * (z.transpose() * raw),
        None => raw,
    };
    covariates_from_coef(&coef, r)
}

/// Projection basis onto cubic splines with zero second derivative at both
/// boundaries; on equidistant knots `f''` at an end knot is the second
/// difference of the three outermost coefficients.
fn natural_projection(kappa: usize) -> Option<DMatrix<f64>> {
    if kappa < 4 {
        return None;
    }
    let mut c = DMatrix::zeros(2, kappa);
    for (k, v) in [1.0, -2.0, 1.0].into_iter().enumerate() {
        c[(0, k)] = v;
        c[(1, kappa - 3 + k)] = v;
    }
    Some(null_space(&c))
}

fn covariates_from_coef(coef: &DMatrix<f64>, r: usize) -> Result<FunctionalCovariate> {
    let grid = TimeGrid::equidistant(0.0, 1.0, r)?;
    let phi = bspline_design(&covariate_basis(coef.nrows())?, grid.points())?;
    let values = (phi * coef).transpose();
    FunctionalCovariate::new(COVARIATE, grid, values)
}

/// `σ = sd(Ξ) / SNR`, with the sample standard deviation over all values;
/// an infinite SNR gives `σ = 0`.
pub fn snr_sigma(xi: &[f64], snr: f64) -> Result<f64> {
    if !(snr > 0.0) {
        return Err(Error::InvalidInput(format!("SNR must be positive, got {snr}")));
    }
    if xi.len() < 2 {
        return Err(Error::InvalidInput("linear predictor needs at least 2 values".into()));
    }
    let n = xi.len() as f64;
    let mean = xi.iter().sum::<f64>() / n;
    let var = xi.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    if !(var > 0.0) {
        return Err(Error::InvalidInput("linear predictor is constant".into()));
    }
    Ok(if snr.is_infinite() { 0.0 } else { var.sqrt() / snr })
}

/// Two-dimensional trapezoid weights of a rectangular grid.
fn grid_weights(s: &[f64], t: &[f64]) -> Result<DMatrix<f64>> {
    let ws = if s.len() > 1 { crate::fdgrid::trapezoid_weights(s)? } else { vec![1.0] };
    let wt = if t.len() > 1 { crate::fdgrid::trapezoid_weights(t)? } else { vec![1.0] };
    Ok(DMatrix::from_fn(s.len(), t.len(), |a, b| ws[a] * wt[b]))
}

/// `Σ_levels ∬(β̂ − β)² / Σ_levels ∬β²` by the trapezoid rule on the grid,
/// restricted to the integration region of the truth.
pub fn relimse_grid(estimates: &[DMatrix<f64>], truths: &[TrueSurface], s: &[f64], t: &[f64]) -> Result<f64> {
    if estimates.len() != truths.len() {
        return Err(Error::DimensionMismatch("estimate and truth level counts differ".into()));
    }
    let w = grid_weights(s, t)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (est, tr) in estimates.iter().zip(truths) {
        if est.shape() != (s.len(), t.len()) {
            return Err(Error::DimensionMismatch("surface grid".into()));
        }
        for a in 0..s.len() {
            for b in 0..t.len() {
                if !tr.in_region(s[a], t[b]) {
                    continue;
                }
                let v = tr.raw(s[a], t[b]);
                num += w[(a, b)] * (est[(a, b)] - v).powi(2);
                den += w[(a, b)] * v * v;
            }
        }
    }
    if !(den > 0.0) {
        return Err(Error::InvalidInput("true surface is identically zero".into()));
    }
    Ok(num / den)
}

/// reliMSE of an estimated surface, matching levels by label.
pub fn relimse(estimate: &CoefficientSurface, truth: &TrueEffect) -> Result<f64> {
    let mut est = Vec::with_capacity(truth.levels.len());
    for label in &truth.levels {
        let v = estimate.level(label).ok_or_else(|| Error::UnknownLevel {
            factor: estimate.effect.clone(),
            level: label.clone(),
        })?;
        est.push(v.clone());
    }
    relimse_grid(&est, &truth.surfaces, &estimate.s, &estimate.t)
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    let width = n.to_string().len();
    (1..=n).map(|k| format!("{prefix}{k:0width$}")).collect()
}

fn centre(values: &mut [f64], psi: &[f64]) {
    let total: f64 = psi.iter().sum();
    let mean = values.iter().zip(psi).map(|(v, p)| v * p).sum::<f64>() / total;
    values.iter_mut().for_each(|v| *v -= mean);
}

/// Level of each curve: `condition = i mod η`, `subject = ⌊i / η⌋ mod n_subject`
/// (or `i mod n_subject` without conditions).
fn layout(scenario: Scenario, p: &SimParams) -> (Option<Vec<usize>>, Option<Vec<usize>>) {
    let cond = scenario.has_condition().then(|| (0..p.n).map(|i| i % p.eta).collect());
    let subj = scenario.has_subject().then(|| {
        if scenario.has_condition() {
            (0..p.n).map(|i| (i / p.eta) % p.n_subject).collect()
        } else {
            (0..p.n).map(|i| i % p.n_subject).collect()
        }
    });
    (cond, subj)
}

fn counts(codes: &[usize], k: usize) -> Vec<f64> {
    let mut c = vec![0.0; k];
    for &v in codes {
        c[v] += 1.0;
    }
    c
}

const RANDOM_BASIS: usize = 5;

/// Generate a dataset for a scenario.
pub fn simulate(scenario: Scenario, p: &SimParams) -> Result<SimulatedDataset> {
    p.validate(scenario)?;
    let x = gen_covariates(p.n, p.d, p.kappa, p.seed)?;
    let grid = x.grid.clone();
    let pts = grid.points().to_vec();
    let mut rng = rng_for(p.seed, STREAM_EFFECTS);
    let (cond, subj) = layout(scenario, p);
    let cond_labels = labels("cond", p.eta);
    let subj_labels = labels("subj", p.n_subject);
    let main = match scenario {
        Scenario::Band => SurfaceForm::Band { lag: 0.1, t_max: 0.75 },
        Scenario::BootstrapTruth | Scenario::BootstrapFactor => SurfaceForm::ThresholdedWave,
        _ => SurfaceForm::Multimodal,
    };
    let mut surfaces = vec![TrueEffect {
        effect: "hist".into(),
        family: Family::Historical,
        levels: vec![String::new()],
        surfaces: vec![TrueSurface::new(main)],
    }];
    // Per-curve index into each effect's level list.
    let mut surface_level: Vec<Vec<usize>> = vec![vec![0; p.n]];
    let mut curves = Vec::new();
    let mut curve_level: Vec<Vec<usize>> = Vec::new();
    let t_basis = MarginalBasis::equidistant(0.0, 1.0, RANDOM_BASIS, 3)?;
    let k5 = t_basis.dim();

    if let Some(c) = &cond {
        let psi = counts(c, p.eta);
        if scenario.has_time_varying() {
            // γ_e(t) = a_e sin(2πt), represented through a least-squares spline
            // fit on a fine grid so that the truth is a spline curve.
            let mut amp: Vec<f64> = (0..p.eta).map(|_| rng.sample(Uniform::new(-1.0, 1.0).unwrap())).collect();
            centre(&mut amp, &psi);
            let fine: Vec<f64> = (0..=200).map(|k| k as f64 / 200.0).collect();
            let tb = MarginalBasis::equidistant(0.0, 1.0, 12, 3)?;
            let phi = bspline_design(&tb, &fine)?;
            let target = nalgebra::DVector::from_iterator(fine.len(), fine.iter().map(|t| (2.0 * PI * t).sin()));
            let base = (phi.transpose() * &phi).cholesky().expect("full rank").solve(&(phi.transpose() * target));
            curves.push(TrueCurves {
                effect: "cond_tv".into(),
                family: Family::TimeVarying,
                levels: cond_labels.clone(),
                basis: tb,
                coef: amp.iter().map(|a| base.iter().map(|b| a * b).collect()).collect(),
            });
            curve_level.push(c.clone());
        }
        let (lo, hi) = if scenario == Scenario::BootstrapFactor { (-1.0, 1.0) } else { (-5.0, 5.0) };
        let mut iota: Vec<f64> = (0..p.eta).map(|_| rng.sample(Uniform::new(lo, hi).unwrap())).collect();
        centre(&mut iota, &psi);
        let forms = iota
            .iter()
            .map(|&scale| {
                TrueSurface::new(if scenario == Scenario::BootstrapFactor {
                    SurfaceForm::ThresholdedBump { scale, mean: 0.9, sd: 0.2 }
                } else {
                    SurfaceForm::Varpi { scale }
                })
            })
            .collect();
        surfaces.push(TrueEffect {
            effect: "hist_cond".into(),
            family: Family::FactorHistorical,
            levels: cond_labels.clone(),
            surfaces: forms,
        });
        surface_level.push(c.clone());
    }
    if let Some(sj) = &subj {
        let psi = counts(sj, p.n_subject);
        let draw_centred = |len: usize, rng: &mut ChaCha8Rng| {
            let mut m = DMatrix::from_fn(p.n_subject, len, |_, _| rng.sample::<f64, _>(StandardNormal));
            for k in 0..len {
                let mut col: Vec<f64> = m.column(k).iter().cloned().collect();
                centre(&mut col, &psi);
                m.set_column(k, &nalgebra::DVector::from_vec(col));
            }
            m
        };
        if scenario.has_time_varying() {
            let b = draw_centred(k5, &mut rng);
            curves.push(TrueCurves {
                effect: "subj_tv".into(),
                family: Family::RandomIntercept,
                levels: subj_labels.clone(),
                basis: t_basis.clone(),
                coef: (0..p.n_subject).map(|f| b.row(f).iter().cloned().collect()).collect(),
            });
            curve_level.push(sj.clone());
        }
        let c = draw_centred(k5 * k5, &mut rng);
        surfaces.push(TrueEffect {
            effect: "hist_subj".into(),
            family: Family::RandomHistorical,
            levels: subj_labels.clone(),
            surfaces: (0..p.n_subject)
                .map(|f| {
                    TrueSurface::new(SurfaceForm::Spline {
                        s_basis: t_basis.clone(),
                        t_basis: t_basis.clone(),
                        coef: c.row(f).iter().cloned().collect(),
                    })
                })
                .collect(),
        });
        surface_level.push(sj.clone());
    }
    if scenario == Scenario::Full {
        let (c, sj) = (cond.as_ref().unwrap(), subj.as_ref().unwrap());
        let mut psi = DMatrix::zeros(p.eta, p.n_subject);
        for i in 0..p.n {
            psi[(c[i], sj[i])] += 1.0;
        }
        let z = double_sum_to_zero_transform(&psi)?.z;
        let raw = nalgebra::DVector::from_fn(p.eta * p.n_subject, |_, _| rng.sample::<f64, _>(StandardNormal));
        let coef = &z * (z.transpose() * raw);
        let mut lv = Vec::new();
        let mut forms = Vec::new();
        for e in 0..p.eta {
            for f in 0..p.n_subject {
                lv.push(format!("{}:{}", cond_labels[e], subj_labels[f]));
                forms.push(TrueSurface::new(SurfaceForm::Varpi { scale: coef[e * p.n_subject + f] }));
            }
        }
        surfaces.push(TrueEffect {
            effect: "hist_cond_subj".into(),
            family: Family::DoublyVaryingHistorical,
            levels: lv,
            surfaces: forms,
        });
        surface_level.push((0..p.n).map(|i| c[i] * p.n_subject + sj[i]).collect());
    }

    // Linear predictor Ξ_i(t) = Σ_r Δ(s_r) x_i(s_r) Σ_j β_j(s_r, t) + Σ γ(t).
    let wts = grid.weights();
    let d = pts.len();
    let mut xi = vec![0.0; p.n * d];
    let tables: Vec<Vec<DMatrix<f64>>> =
        surfaces.iter().map(|e| e.surfaces.iter().map(|s| s.grid(&pts, &pts)).collect()).collect();
    for i in 0..p.n {
        let mut beta = DMatrix::zeros(d, d);
        for (j, tab) in tables.iter().enumerate() {
            beta += &tab[surface_level[j][i]];
        }
        for (b, &t) in pts.iter().enumerate() {
            let mut acc = 0.0;
            for r in 0..d {
                acc += wts[r] * x.values[(i, r)] * beta[(r, b)];
            }
            for (k, cv) in curves.iter().enumerate() {
                acc += cv.eval(curve_level[k][i], t);
            }
            xi[i * d + b] = acc;
        }
    }
    let sigma = snr_sigma(&xi, p.snr)?;
    let mut noise_rng = rng_for(p.seed, STREAM_NOISE);
    let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let response = (0..p.n)
        .map(|i| ResponseCurve {
            grid: grid.clone(),
            values: (0..d)
                .map(|b| xi[i * d + b] + if sigma > 0.0 { noise_rng.sample(noise) } else { 0.0 })
                .collect(),
        })
        .collect();
    let mut categorical = Vec::new();
    if let Some(c) = &cond {
        categorical.push(CategoricalCovariate::from_codes(CONDITION, cond_labels.clone(), c.clone())?);
    }
    if let Some(sj) = &subj {
        categorical.push(CategoricalCovariate::from_codes(SUBJECT, subj_labels.clone(), sj.clone())?);
    }
    let width = p.n.to_string().len();
    let dataset = FunctionalDataset::new(
        RESPONSE,
        (1..=p.n).map(|i| format!("curve{i:0width$}")).collect(),
        response,
        vec![x],
        categorical,
    )?;
    Ok(SimulatedDataset { scenario, params: p.clone(), dataset, surfaces, curves, linear_predictor: xi, sigma })
}

pub fn gen_multimodal(n: usize, d: usize, snr: f64, kappa: usize, seed: u64) -> Result<SimulatedDataset> {
    simulate(Scenario::Multimodal, &SimParams { n, d, snr, kappa, seed, ..Default::default() })
}

pub fn gen_band(n: usize, d: usize, snr: f64, seed: u64) -> Result<SimulatedDataset> {
    simulate(Scenario::Band, &SimParams { n, d, snr, seed, ..Default::default() })
}

pub fn gen_factor_specific(n: usize, d: usize, snr: f64, eta: usize, seed: u64) -> Result<SimulatedDataset> {
    simulate(Scenario::Factor, &SimParams { n, d, snr, eta, seed, ..Default::default() })
}

pub fn gen_random_historical(
    n: usize,
    d: usize,
    snr: f64,
    n_subject: usize,
    doubly_varying: bool,
    seed: u64,
) -> Result<SimulatedDataset> {
    let scenario = if doubly_varying { Scenario::Full } else { Scenario::Random };
    simulate(scenario, &SimParams { n, d, snr, n_subject, seed, ..Default::default() })
}

pub fn gen_bootstrap_truth(n: usize, d: usize, snr: f64, seed: u64) -> Result<SimulatedDataset> {
    simulate(Scenario::BootstrapTruth, &SimParams { n, d, snr, seed, ..Default::default() })
}

/// Model matching the data-generating process of a scenario. `hist` sets the
/// marginal basis size of the main and factor-specific historical effects;
/// random and doubly-varying effects keep their smaller defaults.
pub fn scenario_specs(scenario: Scenario, hist: Option<BasisSize>) -> Vec<LearnerSpec> {
    let lim = HistoryLimits::Lead { delta: SIM_DELTA };
    let hs = |name: &str| LearnerSpec::historical(name, COVARIATE, lim).with_bases(hist, hist);
    let mut specs = vec![LearnerSpec::intercept(), hs("hist")];
    if scenario.has_condition() {
        if scenario.has_time_varying() {
            specs.push(LearnerSpec::new("cond_tv", Family::TimeVarying).with_factors([CONDITION]));
        }
        specs.push(hs("hist_cond").with_family(Family::FactorHistorical).with_factors([CONDITION]));
    }
    if scenario.has_subject() {
        if scenario.has_time_varying() {
            specs.push(LearnerSpec::new("subj_tv", Family::RandomIntercept).with_factors([SUBJECT]));
        }
        specs.push(
            LearnerSpec::historical("hist_subj", COVARIATE, lim)
                .with_family(Family::RandomHistorical)
                .with_factors([SUBJECT]),
        );
    }
    if scenario == Scenario::Full {
        specs.push(
            LearnerSpec::historical("hist_cond_subj", COVARIATE, lim)
                .with_family(Family::DoublyVaryingHistorical)
                .with_factors([CONDITION, SUBJECT])
                .with_mode(Mode::Separated),
        );
    }
    specs
}

/// Misspecified model for a scenario: only the main historical effect when
/// the data add a single varying historical effect, and the full model
/// without the doubly-varying effect for full-model data.
pub fn reduced_specs(scenario: Scenario, hist: Option<BasisSize>) -> Option<Vec<LearnerSpec>> {
    let full = scenario_specs(scenario, hist);
    match scenario {
        Scenario::FactorHistorical | Scenario::RandomHistorical => Some(full.into_iter().take(2).collect()),
        Scenario::Full => Some(full.into_iter().filter(|s| s.family != Family::DoublyVaryingHistorical).collect()),
        _ => None,
    }
}
