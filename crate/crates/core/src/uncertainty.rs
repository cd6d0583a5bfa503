//! Curve- or subject-level bootstrap bands for historical effects and the
//! zero-detection diagnostics computed from them.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselearners::LearnerSpec;
use crate::boostcore::{BoostConfig, BoostModel, CoefficientSurface, Prepared, ResamplingUnit};
use crate::error::{Error, Result};
use crate::fdgrid::FunctionalDataset;
use crate::linalg::quantile_sorted;

/// Bootstrap settings. `alphas` are in percent: `α = 5` gives the band
/// `[q_{0.025}, q_{0.975}]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub unit: ResamplingUnit,
    /// Points per axis of the evaluation grid.
    pub grid: usize,
    pub keep_replicates: bool,
    /// Draws per replicate before giving up on a missing level.
    pub max_redraws: usize,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 100,
            alphas: vec![5.0],
            seed: 1,
            unit: ResamplingUnit::Curve,
            grid: 40,
            keep_replicates: false,
            max_redraws: 50,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config("bootstrap needs at least 2 replicates".into()));
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 100.0)) {
            return Err(Error::Config("alpha levels must lie in (0, 100) percent".into()));
        }
        if self.grid < 2 {
            return Err(Error::Config("evaluation grid needs at least 2 points".into()));
        }
        Ok(())
    }
}

/// Pointwise band `[q_{α/2}, q_{1−α/2}]` for every level of an effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaBand {
    pub alpha: f64,
    pub lower: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

/// Bands of one historical effect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectBands {
    pub effect: String,
    pub levels: Vec<String>,
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub identified: DMatrix<bool>,
    pub bands: Vec<AlphaBand>,
}

impl EffectBands {
    pub fn band(&self, alpha: f64) -> Result<&AlphaBand> {
        self.bands
            .iter()
            .find(|b| (b.alpha - alpha).abs() < 1e-12)
            .ok_or_else(|| Error::InvalidInput(format!("alpha {alpha} was not computed for '{}'", self.effect)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapBands {
    pub replicates: usize,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub effects: Vec<EffectBands>,
    /// Draws rejected for a missing level, summed over replicates.
    pub redraws: usize,
    /// `m*` of every replicate.
    pub mstar: Vec<usize>,
    /// Replicate surfaces per effect, if retained.
    pub surfaces: Option<Vec<Vec<CoefficientSurface>>>,
}

impl BootstrapBands {
    pub fn effect(&self, name: &str) -> Result<&EffectBands> {
        self.effects
            .iter()
            .find(|e| e.effect == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }
}

/// Curve weights of one bootstrap draw: units are drawn with replacement and
/// every curve of a unit drawn `k` times gets weight `k`.
pub fn resample_weights<R: Rng>(ds: &FunctionalDataset, unit: &ResamplingUnit, rng: &mut R) -> Result<Vec<f64>> {
    let n = ds.n_curves();
    let (unit_of, n_units) = match unit {
        ResamplingUnit::Curve => ((0..n).collect::<Vec<_>>(), n),
        ResamplingUnit::Factor(name) => {
            let z = ds.categorical(name)?;
            (z.codes.clone(), z.n_levels())
        }
    };
    let mut mult = vec![0.0; n_units];
    for _ in 0..n_units {
        mult[rng.random_range(0..n_units)] += 1.0;
    }
    Ok(unit_of.iter().map(|&u| mult[u]).collect())
}

/// Generator of replicate `r`: stream `r + 1` of the seeded ChaCha8.
pub fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng
}

fn eval_grid(n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

/// Evaluation grids of every historical effect of a fitted model.
pub fn historical_surfaces(model: &BoostModel, grid: usize) -> Result<Vec<CoefficientSurface>> {
    use crate::baselearners::BaseSpec;
    model
        .learners
        .iter()
        .enumerate()
        .filter_map(|(j, l)| match &l.base {
            BaseSpec::History { s_basis, t_basis, .. } => {
                let s = eval_grid(grid, s_basis.lower(), s_basis.upper());
                let t = eval_grid(grid, t_basis.lower(), t_basis.upper());
                Some(model.coefficient_surface(j, &s, &t))
            }
            BaseSpec::Time { .. } => None,
        })
        .collect()
}

/// One bootstrap replicate: full refit (constraints, `λ`, `m*`) with
/// resampled weights, redrawn while a required level is missing.
fn replicate(
    prep: &Prepared<'_>,
    boost: &BoostConfig,
    cfg: &BootstrapConfig,
    r: usize,
) -> Result<(Vec<CoefficientSurface>, usize, usize)> {
    let mut rng = replicate_rng(cfg.seed, r);
    for attempt in 0..cfg.max_redraws.max(1) {
        let w = resample_weights(prep.ds, &cfg.unit, &mut rng)?;
        match prep.fit_weighted(&w, boost) {
            Ok(model) => return Ok((historical_surfaces(&model, cfg.grid)?, model.mstar, attempt)),
            Err(e @ (Error::EmptyLevel { .. } | Error::EmptyFold(_))) => {
                log::info!("bootstrap replicate {r}: draw {attempt} rejected ({e})");
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::InvalidInput(format!(
        "bootstrap replicate {r}: no admissible draw in {} attempts",
        cfg.max_redraws
    )))
}

/// Nonparametric bootstrap of the whole fitting pipeline.
pub fn bootstrap_fit(
    ds: &FunctionalDataset,
    specs: &[LearnerSpec],
    boost: &BoostConfig,
    cfg: &BootstrapConfig,
) -> Result<BootstrapBands> {
    cfg.validate()?;
    boost.validate()?;
    let prep = Prepared::new(ds, specs)?;
    let reps = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| replicate(&prep, boost, cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let redraws = reps.iter().map(|r| r.2).sum();
    let mstar = reps.iter().map(|r| r.1).collect();
    let surfaces: Vec<Vec<CoefficientSurface>> = reps.into_iter().map(|r| r.0).collect();
    let Some(first) = surfaces.first() else {
        return Err(Error::InvalidInput("no replicates".into()));
    };
    if first.is_empty() {
        return Err(Error::InvalidInput("model has no historical effects".into()));
    }
    let effects = (0..first.len())
        .map(|e| {
            let proto = &first[e];
            let bands = cfg
                .alphas
                .iter()
                .map(|&alpha| {
                    let (lo, hi) = (alpha / 200.0, 1.0 - alpha / 200.0);
                    let per_level = |q: f64| -> Vec<DMatrix<f64>> {
                        (0..proto.levels.len())
                            .map(|k| {
                                DMatrix::from_fn(proto.s.len(), proto.t.len(), |a, b| {
                                    let mut v: Vec<f64> = surfaces.iter().map(|r| r[e].values[k][(a, b)]).collect();
                                    v.sort_by(f64::total_cmp);
                                    quantile_sorted(&v, q)
                                })
                            })
                            .collect()
                    };
                    AlphaBand { alpha, lower: per_level(lo), upper: per_level(hi) }
                })
                .collect();
            EffectBands {
                effect: proto.effect.clone(),
                levels: proto.levels.clone(),
                s: proto.s.clone(),
                t: proto.t.clone(),
                identified: proto.identified.clone(),
                bands,
            }
        })
        .collect();
    Ok(BootstrapBands {
        replicates: cfg.replicates,
        alphas: cfg.alphas.clone(),
        seed: cfg.seed,
        effects,
        redraws,
        mstar,
        surfaces: cfg.keep_replicates.then_some(surfaces),
    })
}

/// Whether zero lies outside the closed band, per level and grid point.
pub fn zero_exclusion(bands: &EffectBands, alpha: f64) -> Result<Vec<DMatrix<bool>>> {
    let band = bands.band(alpha)?;
    Ok(band
        .lower
        .iter()
        .zip(&band.upper)
        .map(|(lo, hi)| lo.zip_map(hi, |l, u| l > 0.0 || u < 0.0))
        .collect())
}

/// Detection rates over simulated datasets. Grid points outside `mask` are
/// ignored. Per-point frequencies are NaN where they do not apply.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    /// Per dataset: share of truly nonzero points whose band contains zero.
    pub fnr: Vec<f64>,
    /// Per dataset: share of truly zero points whose band excludes zero.
    pub fpr: Vec<f64>,
    /// Per point: frequency of false negatives across datasets.
    pub ffn: DMatrix<f64>,
    /// Per point: frequency of false positives across datasets.
    pub ffp: DMatrix<f64>,
    /// `(|β|, FFN)` for every truly nonzero point.
    pub ffn_by_magnitude: Vec<(f64, f64)>,
    /// `(distance to the nonzero region in grid cells, FFP)` for every truly
    /// zero point; distance is the Chebyshev distance on the grid.
    pub ffp_by_distance: Vec<(usize, f64)>,
}

pub fn detection_metrics(
    exclusions: &[DMatrix<bool>],
    truth: &DMatrix<f64>,
    mask: Option<&DMatrix<bool>>,
) -> Result<DetectionReport> {
    let shape = truth.shape();
    if exclusions.is_empty() {
        return Err(Error::InvalidInput("no datasets given".into()));
    }
    if exclusions.iter().any(|e| e.shape() != shape) || mask.is_some_and(|m| m.shape() != shape) {
        return Err(Error::DimensionMismatch("exclusion grid and truth differ in shape".into()));
    }
    let inside = |a: usize, b: usize| mask.is_none_or(|m| m[(a, b)]);
    let points: Vec<(usize, usize)> =
        (0..shape.0).flat_map(|a| (0..shape.1).map(move |b| (a, b))).filter(|&(a, b)| inside(a, b)).collect();
    let nonzero: Vec<(usize, usize)> = points.iter().cloned().filter(|&p| truth[p] != 0.0).collect();
    let zero: Vec<(usize, usize)> = points.iter().cloned().filter(|&p| truth[p] == 0.0).collect();
    if nonzero.is_empty() {
        return Err(Error::InvalidInput("truth has no nonzero points".into()));
    }
    if zero.is_empty() {
        return Err(Error::InvalidInput("truth has no zero points".into()));
    }
    let fnr = exclusions
        .iter()
        .map(|e| nonzero.iter().filter(|&&p| !e[p]).count() as f64 / nonzero.len() as f64)
        .collect();
    let fpr = exclusions.iter().map(|e| zero.iter().filter(|&&p| e[p]).count() as f64 / zero.len() as f64).collect();
    let k = exclusions.len() as f64;
    let freq = |p: (usize, usize), want: bool| exclusions.iter().filter(|e| e[p] == want).count() as f64 / k;
    let mut ffn = DMatrix::from_element(shape.0, shape.1, f64::NAN);
    let mut ffp = DMatrix::from_element(shape.0, shape.1, f64::NAN);
    let mut ffn_by_magnitude = Vec::with_capacity(nonzero.len());
    for &p in &nonzero {
        ffn[p] = freq(p, false);
        ffn_by_magnitude.push((truth[p].abs(), ffn[p]));
    }
    let mut ffp_by_distance = Vec::with_capacity(zero.len());
    for &p in &zero {
        ffp[p] = freq(p, true);
        let dist = nonzero.iter().map(|q| p.0.abs_diff(q.0).max(p.1.abs_diff(q.1))).min().unwrap_or(0);
        ffp_by_distance.push((dist, ffp[p]));
    }
    Ok(DetectionReport { fnr, fpr, ffn, ffp, ffn_by_magnitude, ffp_by_distance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselearners::{BasisSize, LearnerSpec};
    use crate::fdgrid::{CategoricalCovariate, HistoryLimits};
    use crate::simgen::{gen_multimodal, Scenario, SimParams};

    fn band(lower: f64, upper: f64) -> EffectBands {
        EffectBands {
            effect: "b".into(),
            levels: vec![String::new()],
            s: vec![0.0],
            t: vec![0.0],
            identified: DMatrix::from_element(1, 1, true),
            bands: vec![AlphaBand {
                alpha: 5.0,
                lower: vec![DMatrix::from_element(1, 1, lower)],
                upper: vec![DMatrix::from_element(1, 1, upper)],
            }],
        }
    }

    #[test]
    fn zero_exclusion_examples() {
        let ex = |l, u| zero_exclusion(&band(l, u), 5.0).unwrap()[0][(0, 0)];
        assert!(!ex(-1.0, 1.0));
        assert!(ex(0.2, 0.9));
        assert!(!ex(-0.3, 0.0));
        assert!(zero_exclusion(&band(0.0, 1.0), 10.0).is_err());
    }

    #[test]
    fn detection_examples() {
        let truth = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let e = DMatrix::from_row_slice(2, 2, &[true, true, false, false]);
        let r = detection_metrics(&[e], &truth, None).unwrap();
        assert_eq!((r.fnr[0], r.fpr[0]), (0.5, 0.5));
        let perfect = truth.map(|v| v != 0.0);
        let r = detection_metrics(&[perfect], &truth, None).unwrap();
        assert_eq!((r.fnr[0], r.fpr[0]), (0.0, 0.0));
        let none = DMatrix::from_element(2, 2, false);
        let r = detection_metrics(&[none], &truth, None).unwrap();
        assert_eq!((r.fnr[0], r.fpr[0]), (1.0, 0.0));
        assert!(detection_metrics(&[DMatrix::from_element(2, 2, false)], &DMatrix::zeros(2, 2), None).is_err());
    }

    #[test]
    fn detection_distances_and_mask() {
        let mut truth = DMatrix::zeros(4, 4);
        truth[(0, 0)] = 0.7;
        let mask = DMatrix::from_fn(4, 4, |a, _| a < 3);
        let r = detection_metrics(&[truth.map(|v| v != 0.0)], &truth, Some(&mask)).unwrap();
        assert_eq!(r.ffp_by_distance.len(), 11);
        assert_eq!(r.ffp_by_distance.iter().map(|d| d.0).max(), Some(3));
        assert!(r.ffp[(3, 3)].is_nan());
        assert_eq!(r.ffn_by_magnitude, vec![(0.7, 0.0)]);
    }

    #[test]
    fn weights_keep_units_together() {
        let p = SimParams { n: 12, d: 8, kappa: 5, n_subject: 3, ..Default::default() };
        let sim = crate::simgen::simulate(Scenario::Random, &p).unwrap();
        let mut rng = replicate_rng(3, 0);
        let w = resample_weights(&sim.dataset, &ResamplingUnit::Factor("subject".into()), &mut rng).unwrap();
        let z: &CategoricalCovariate = sim.dataset.categorical("subject").unwrap();
        for i in 0..12 {
            for k in 0..12 {
                if z.codes[i] == z.codes[k] {
                    assert_eq!(w[i], w[k]);
                }
            }
        }
        assert_eq!(w.iter().sum::<f64>(), 12.0);
    }

    fn small_specs() -> Vec<LearnerSpec> {
        let b = Some(BasisSize::cubic(5, 1));
        vec![
            LearnerSpec::intercept(),
            LearnerSpec::historical("hist", "x", HistoryLimits::Lead { delta: 0.025 }).with_bases(b, b),
        ]
    }

    #[test]
    fn deterministic_and_nested() {
        let sim = gen_multimodal(30, 12, 1.0, 5, 2).unwrap();
        let boost = BoostConfig { mstop: 100, folds: 3, ..Default::default() };
        let cfg = BootstrapConfig { replicates: 8, alphas: vec![1.0, 10.0], grid: 6, ..Default::default() };
        let a = bootstrap_fit(&sim.dataset, &small_specs(), &boost, &cfg).unwrap();
        let b = bootstrap_fit(&sim.dataset, &small_specs(), &boost, &cfg).unwrap();
        assert_eq!(a, b);
        let e = a.effect("hist").unwrap();
        let (wide, narrow) = (e.band(1.0).unwrap(), e.band(10.0).unwrap());
        for ((wl, wu), (nl, nu)) in wide.lower[0].iter().zip(wide.upper[0].iter()).zip(narrow.lower[0].iter().zip(narrow.upper[0].iter())) {
            assert!(wl <= nl && nl <= nu && nu <= wu);
        }
    }

    #[test]
    fn constant_zero_response_gives_degenerate_bands() {
        let mut sim = gen_multimodal(20, 10, f64::INFINITY, 5, 4).unwrap();
        for c in &mut sim.dataset.response {
            c.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let boost = BoostConfig { mstop: 20, folds: 0, ..Default::default() };
        let cfg = BootstrapConfig { replicates: 4, grid: 5, ..Default::default() };
        let bands = bootstrap_fit(&sim.dataset, &small_specs(), &boost, &cfg).unwrap();
        let band = bands.effect("hist").unwrap().band(5.0).unwrap();
        assert!(band.lower[0].iter().chain(band.upper[0].iter()).all(|v| v.abs() < 1e-12));
    }
}
