//! Command-line front end.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::baselearners::{BaseSpec, BasisSize, Family, LearnerSpec, LevelPenalty, Mode};
use crate::boostcore::{select_mstop, BoostConfig, BoostModel, CoefficientSurface, Prepared, ResamplingUnit};
use crate::error::{Error, Result};
use crate::fdgrid::{read_dataset_csv, write_dataset_csv, CategoricalCovariate, FunctionalDataset, HistoryLimits};
use crate::simgen::{self, relimse_grid, reduced_specs, scenario_specs, Scenario, SimParams, Truth};
use crate::uncertainty::{
    bootstrap_fit, detection_metrics, historical_surfaces, zero_exclusion, BootstrapBands, BootstrapConfig,
};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

const DATA_FILE: &str = "data.csv";
const CATEGORICAL_FILE: &str = "categorical.csv";

#[derive(Debug, Parser)]
#[command(name = "histboost", version, about = "Boosted historical function-on-function regression")]
pub struct Cli {
    /// Worker threads; 0 picks one per core.
    #[arg(long, global = true, default_value_t = 0, env = "HISTBOOST_THREADS")]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a simulated dataset with its truth and a matching model config.
    Simulate(SimulateArgs),
    /// Fit a model and write it with a fit report.
    Fit(FitArgs),
    /// Cross-validate the stopping iteration only.
    Cv(FitArgs),
    /// Bootstrap bands for all historical effects.
    Bootstrap(BootstrapArgs),
    /// Export estimated surfaces and curves on a grid.
    Coef(CoefArgs),
    /// Compare a fitted model against a simulation truth.
    Evaluate(EvaluateArgs),
    /// Write the 13-effect EMG-EEG model config.
    Template(TemplateArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: Scenario,
    #[arg(long, default_value_t = 160)]
    pub n: usize,
    /// Grid points per curve.
    #[arg(long, default_value_t = 40)]
    pub d: usize,
    /// Signal-to-noise ratio; `inf` for noiseless data.
    #[arg(long, default_value_t = 1.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 11)]
    pub kappa: usize,
    #[arg(long, default_value_t = 4)]
    pub eta: usize,
    #[arg(long, default_value_t = 10)]
    pub subjects: usize,
    /// Marginal basis size of historical main and factor effects in the
    /// emitted config.
    #[arg(long, default_value_t = 16)]
    pub basis: usize,
    #[arg(long, default_value_t = 8000)]
    pub mstop: usize,
    #[arg(long, default_value_t = 1, env = "HISTBOOST_SEED")]
    pub seed: u64,
    /// Add the binary appraisal factors derived from 8 conditions.
    #[arg(long)]
    pub appraisals: bool,
    #[arg(long, env = "HISTBOOST_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TemplateArgs {
    /// Lead of the historical effects, in time units of the data.
    #[arg(long, default_value_t = 12.0)]
    pub delta: f64,
    #[arg(long, default_value = "emg")]
    pub response: String,
    /// Functional covariate of the historical effects.
    #[arg(long, default_value = "eeg")]
    pub covariate: String,
    #[arg(long, default_value = simgen::CONDITION)]
    pub condition: String,
    #[arg(long, default_value = simgen::SUBJECT)]
    pub subject: String,
    /// Destination TOML file.
    #[arg(long, env = "HISTBOOST_OUT")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long, env = "HISTBOOST_CONFIG")]
    pub config: PathBuf,
    /// Directory holding `data.csv` and optionally `categorical.csv`.
    #[arg(long, env = "HISTBOOST_DATA")]
    pub data: PathBuf,
    #[arg(long, env = "HISTBOOST_OUT")]
    pub out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long, env = "HISTBOOST_SEED")]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct BootstrapArgs {
    #[command(flatten)]
    pub fit: FitArgs,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, env = "HISTBOOST_GRID")]
    pub grid: Option<usize>,
    /// Band levels in percent, comma separated.
    #[arg(long, value_delimiter = ',', env = "HISTBOOST_ALPHA")]
    pub alpha: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct CoefArgs {
    /// Fitted `model.json`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, env = "HISTBOOST_OUT")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 40, env = "HISTBOOST_GRID")]
    pub grid: usize,
    /// Add zero-exclusion flags for these band levels (needs `--bands`).
    #[arg(long, value_delimiter = ',', env = "HISTBOOST_ALPHA")]
    pub alpha: Vec<f64>,
    /// `bands.json` written by `bootstrap`.
    #[arg(long)]
    pub bands: Option<PathBuf>,
    /// Also export main plus level surfaces of factor-specific effects.
    #[arg(long)]
    pub sum: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// `truth.json` written by `simulate`.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long, default_value_t = 40, env = "HISTBOOST_GRID")]
    pub grid: usize,
    /// Bands for detection rates.
    #[arg(long)]
    pub bands: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0, env = "HISTBOOST_ALPHA")]
    pub alpha: f64,
    /// Optional CSV destination for the metrics table.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoostSection {
    pub nu: f64,
    pub mstop: usize,
    pub df: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for BoostSection {
    fn default() -> Self {
        let d = BoostConfig::default();
        Self { nu: d.nu, mstop: d.mstop, df: d.df, folds: d.folds, seed: d.seed }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResamplingSection {
    /// `"curve"` or the name of a categorical covariate whose levels are
    /// the independent units.
    pub unit: String,
}

impl Default for ResamplingSection {
    fn default() -> Self {
        Self { unit: "curve".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapSection {
    pub replicates: usize,
    pub alphas: Vec<f64>,
    pub grid: usize,
}

impl Default for BootstrapSection {
    fn default() -> Self {
        let d = BootstrapConfig::default();
        Self { replicates: d.replicates, alphas: d.alphas, grid: d.grid }
    }
}

/// Model configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub response: String,
    #[serde(default)]
    pub boost: BoostSection,
    #[serde(default)]
    pub resampling: ResamplingSection,
    #[serde(default)]
    pub bootstrap: BootstrapSection,
    pub effects: Vec<LearnerSpec>,
}

impl ModelConfig {
    pub fn new(response: impl Into<String>, effects: Vec<LearnerSpec>) -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            response: response.into(),
            boost: BoostSection::default(),
            resampling: ResamplingSection::default(),
            bootstrap: BootstrapSection::default(),
            effects,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema version {} (expected {CONFIG_SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let intercepts = self.effects.iter().filter(|e| e.family == Family::Intercept).count();
        if intercepts != 1 {
            return Err(Error::Config(format!("exactly one intercept is required, found {intercepts}")));
        }
        let mut names = std::collections::BTreeSet::new();
        for e in &self.effects {
            if !names.insert(e.name.as_str()) {
                return Err(Error::Config(format!("duplicate effect name '{}'", e.name)));
            }
            if e.factors.len() != e.family.n_factors() {
                return Err(Error::Config(format!(
                    "effect '{}' needs {} factor(s), got {}",
                    e.name,
                    e.family.n_factors(),
                    e.factors.len()
                )));
            }
            if e.family.is_historical() {
                match (&e.covariate, &e.limits) {
                    (Some(_), Some(l)) => l.validate()?,
                    _ => {
                        return Err(Error::Config(format!("historical effect '{}' needs covariate and limits", e.name)))
                    }
                }
            }
        }
        self.boost_config(None)?.validate()?;
        Ok(())
    }

    /// Check that every referenced variable exists in the dataset.
    pub fn check_dataset(&self, ds: &FunctionalDataset) -> Result<()> {
        if ds.response_name != self.response {
            return Err(Error::UnknownVariable(self.response.clone()));
        }
        for e in &self.effects {
            if let Some(c) = &e.covariate {
                ds.functional(c)?;
            }
            for f in &e.factors {
                ds.categorical(f)?;
            }
        }
        if self.resampling.unit != "curve" {
            ds.categorical(&self.resampling.unit)?;
        }
        Ok(())
    }

    pub fn unit(&self) -> ResamplingUnit {
        match self.resampling.unit.as_str() {
            "curve" => ResamplingUnit::Curve,
            name => ResamplingUnit::Factor(name.to_string()),
        }
    }

    pub fn boost_config(&self, seed: Option<u64>) -> Result<BoostConfig> {
        let b = &self.boost;
        Ok(BoostConfig {
            nu: b.nu,
            mstop: b.mstop,
            df: b.df,
            folds: b.folds,
            unit: self.unit(),
            seed: seed.unwrap_or(b.seed),
            ..BoostConfig::default()
        })
    }

    pub fn bootstrap_config(&self, seed: Option<u64>) -> BootstrapConfig {
        BootstrapConfig {
            replicates: self.bootstrap.replicates,
            alphas: self.bootstrap.alphas.clone(),
            seed: seed.unwrap_or(self.boost.seed),
            unit: self.unit(),
            grid: self.bootstrap.grid,
            ..BootstrapConfig::default()
        }
    }
}

/// Read `data.csv` (and `categorical.csv` when present) from a directory.
pub fn read_data_dir(dir: &Path, response: &str) -> Result<FunctionalDataset> {
    let cat = dir.join(CATEGORICAL_FILE);
    read_dataset_csv(&dir.join(DATA_FILE), cat.exists().then_some(cat.as_path()), response)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

pub fn load_model(path: &Path) -> Result<BoostModel> {
    let model: BoostModel = read_json(path)?;
    if model.schema_version != crate::boostcore::MODEL_SCHEMA_VERSION {
        return Err(Error::Config(format!("unsupported model schema version {}", model.schema_version)));
    }
    Ok(model)
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let params = SimParams {
        n: args.n,
        d: args.d,
        snr: args.snr,
        kappa: args.kappa,
        eta: args.eta,
        n_subject: args.subjects,
        seed: args.seed,
    };
    let mut sim = simgen::simulate(args.scenario, &params)?;
    if args.appraisals {
        let condition = sim.dataset.categorical(simgen::CONDITION)?;
        let extra = appraisal_factors(condition)?;
        sim.dataset.categorical.extend(extra);
    }
    fs::create_dir_all(&args.out)?;
    write_dataset_csv(&sim.dataset, &args.out.join(DATA_FILE), &args.out.join(CATEGORICAL_FILE))?;
    write_json(&args.out.join("truth.json"), &sim.truth())?;
    let hist = Some(BasisSize::cubic(args.basis, 1));
    let mut config = ModelConfig::new(simgen::RESPONSE, scenario_specs(args.scenario, hist));
    config.boost.mstop = args.mstop;
    config.boost.seed = args.seed;
    fs::write(args.out.join("model.toml"), config.to_toml()?)?;
    if let Some(reduced) = reduced_specs(args.scenario, hist) {
        let reduced = ModelConfig { effects: reduced, ..config };
        fs::write(args.out.join("model_reduced.toml"), reduced.to_toml()?)?;
    }
    println!(
        "{}: {} curves, {} observations, sigma={:.6} -> {}",
        sim.scenario,
        sim.dataset.n_curves(),
        sim.dataset.n_obs(),
        sim.sigma,
        args.out.display()
    );
    Ok(())
}

/// Binary appraisal factors of the gambling game.
pub const APPRAISALS: [&str; 3] = ["control", "power", "goal"];
/// Sign of the product of the effect-coded appraisals.
pub const APPRAISAL_PRODUCT: &str = "control_power_goal";

/// `control`, `power` and `goal` (levels `low`/`high`) read off the bits of
/// an 8-level condition code, plus their effect-coded product (levels
/// `minus`/`plus`), which carries the three-way interaction.
pub fn appraisal_factors(condition: &CategoricalCovariate) -> Result<Vec<CategoricalCovariate>> {
    if condition.n_levels() != 8 {
        return Err(Error::Config(format!(
            "appraisal factors need 8 condition levels, '{}' has {}",
            condition.name,
            condition.n_levels()
        )));
    }
    let bit = |code: usize, k: usize| (code >> (2 - k)) & 1;
    let two = |a: &str, b: &str| vec![a.to_string(), b.to_string()];
    let mut out = APPRAISALS
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let codes = condition.codes.iter().map(|&c| bit(c, k)).collect();
            CategoricalCovariate::from_codes(*name, two("low", "high"), codes)
        })
        .collect::<Result<Vec<_>>>()?;
    let product = condition.codes.iter().map(|&c| usize::from((0..3).filter(|&k| bit(c, k) == 0).count() % 2 == 0)).collect();
    out.push(CategoricalCovariate::from_codes(APPRAISAL_PRODUCT, two("minus", "plus"), product)?);
    Ok(out)
}

/// The 13 effects of the EMG-EEG model: intercept, subject intercepts,
/// appraisal main effects and interactions, and main, condition-specific,
/// subject-specific and subject-by-condition historical effects with lead
/// `delta`.
pub fn application_config(args: &TemplateArgs) -> ModelConfig {
    let lim = HistoryLimits::Lead { delta: args.delta };
    let [c, p, g] = APPRAISALS;
    let tv = |name: &str| LearnerSpec::new(name, Family::TimeVarying).with_factors([name]);
    let ia = |a: &str, b: &str| LearnerSpec::new(format!("{a}_{b}"), Family::Interaction).with_factors([a, b]);
    let hist = |name: &str| LearnerSpec::historical(name, args.covariate.as_str(), lim);
    let effects = vec![
        LearnerSpec::intercept(),
        LearnerSpec::new("subject_intercept", Family::RandomIntercept).with_factors([args.subject.as_str()]),
        tv(c),
        tv(p),
        tv(g),
        ia(c, p),
        ia(c, g),
        ia(p, g),
        tv(APPRAISAL_PRODUCT),
        hist("hist"),
        hist("hist_condition")
            .with_family(Family::FactorHistorical)
            .with_factors([args.condition.as_str()])
            .with_level_penalty(vec![LevelPenalty::Ridge]),
        hist("hist_subject").with_family(Family::RandomHistorical).with_factors([args.subject.as_str()]),
        hist("hist_condition_subject")
            .with_family(Family::DoublyVaryingHistorical)
            .with_factors([args.condition.as_str(), args.subject.as_str()])
            .with_mode(Mode::Combined),
    ];
    ModelConfig::new(args.response.clone(), effects)
}

pub fn cmd_template(args: &TemplateArgs) -> Result<()> {
    let config = application_config(args);
    config.validate()?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&args.out, config.to_toml()?)?;
    println!("{} effects -> {}", config.effects.len(), args.out.display());
    Ok(())
}

/// Summary written next to a fitted model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub mstar: usize,
    pub mstop: usize,
    pub risk_at_mstar: f64,
    pub cv_risk_at_mstar: Option<f64>,
    pub learners: Vec<LearnerReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnerReport {
    pub name: String,
    pub family: Family,
    pub n_coef: usize,
    pub lambda: f64,
    pub df: f64,
    pub selected: usize,
}

pub fn fit_report(model: &BoostModel) -> FitReport {
    let counts = model.selection_counts();
    FitReport {
        mstar: model.mstar,
        mstop: model.config.mstop,
        risk_at_mstar: model.risk[model.mstar],
        cv_risk_at_mstar: model.cv_risk.as_ref().map(|c| c[model.mstar]),
        learners: model
            .learners
            .iter()
            .zip(counts)
            .map(|(l, selected)| LearnerReport {
                name: l.name.clone(),
                family: l.family,
                n_coef: l.n_coef(),
                lambda: l.lambda,
                df: l.df,
                selected,
            })
            .collect(),
    }
}

fn load_inputs(args: &FitArgs) -> Result<(ModelConfig, FunctionalDataset)> {
    let config = ModelConfig::load(&args.config)?;
    let ds = read_data_dir(&args.data, &config.response)?;
    config.check_dataset(&ds)?;
    Ok((config, ds))
}

pub fn cmd_fit(args: &FitArgs) -> Result<BoostModel> {
    let (config, ds) = load_inputs(args)?;
    let model = Prepared::new(&ds, &config.effects)?.fit(&config.boost_config(args.seed)?)?;
    for l in &model.learners {
        log::info!("{}: lambda={:.6e} df={:.4}", l.name, l.lambda, l.df);
    }
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("model.json"), &model)?;
    let report = fit_report(&model);
    write_json(&args.out.join("fit_report.json"), &report)?;
    let mut w = csv::Writer::from_path(args.out.join("risk.csv"))?;
    w.write_record(["m", "risk", "cv_risk"])?;
    for (m, r) in model.risk.iter().enumerate() {
        let cv = model.cv_risk.as_ref().map_or(String::new(), |c| c[m].to_string());
        w.write_record([m.to_string(), r.to_string(), cv])?;
    }
    w.flush()?;
    println!("mstar={} risk={:.6}", model.mstar, report.risk_at_mstar);
    for l in &report.learners {
        println!("  {:<20} selected={:<6} df={:.3} lambda={:.4e}", l.name, l.selected, l.df, l.lambda);
    }
    Ok(model)
}

pub fn cmd_cv(args: &FitArgs) -> Result<()> {
    let (config, ds) = load_inputs(args)?;
    let cfg = config.boost_config(args.seed)?;
    let cv = select_mstop(&ds, &config.effects, &cfg)?;
    fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("cv.csv"))?;
    let mut header = vec!["m".to_string(), "cv_risk".to_string()];
    header.extend((0..cv.fold_risk.len()).map(|f| format!("fold{f}")));
    w.write_record(&header)?;
    for m in 0..cv.cv_risk.len() {
        let mut row = vec![m.to_string(), cv.cv_risk[m].to_string()];
        row.extend(cv.fold_risk.iter().map(|f| f[m].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    println!("mstar={} cv_risk={:.6}", cv.mstar, cv.cv_risk[cv.mstar]);
    Ok(())
}

fn alpha_label(alpha: f64) -> String {
    format!("excluded_{alpha}")
}

pub fn write_bands_csv(path: &Path, bands: &BootstrapBands) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["effect", "level", "s", "t", "alpha", "lower", "upper", "excluded"])?;
    for e in &bands.effects {
        for band in &e.bands {
            let excl = zero_exclusion(e, band.alpha)?;
            for (k, level) in e.levels.iter().enumerate() {
                for (a, s) in e.s.iter().enumerate() {
                    for (b, t) in e.t.iter().enumerate() {
                        w.write_record([
                            e.effect.clone(),
                            level.clone(),
                            s.to_string(),
                            t.to_string(),
                            band.alpha.to_string(),
                            band.lower[k][(a, b)].to_string(),
                            band.upper[k][(a, b)].to_string(),
                            excl[k][(a, b)].to_string(),
                        ])?;
                    }
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_bootstrap(args: &BootstrapArgs) -> Result<BootstrapBands> {
    let (config, ds) = load_inputs(&args.fit)?;
    let boost = config.boost_config(args.fit.seed)?;
    let mut cfg = config.bootstrap_config(args.fit.seed);
    if let Some(r) = args.replicates {
        cfg.replicates = r;
    }
    if let Some(g) = args.grid {
        cfg.grid = g;
    }
    if !args.alpha.is_empty() {
        cfg.alphas = args.alpha.clone();
    }
    let bands = bootstrap_fit(&ds, &config.effects, &boost, &cfg)?;
    fs::create_dir_all(&args.fit.out)?;
    write_json(&args.fit.out.join("bands.json"), &bands)?;
    write_bands_csv(&args.fit.out.join("bands.csv"), &bands)?;
    println!("{} replicates ({} redraws) -> {}", bands.replicates, bands.redraws, args.fit.out.display());
    Ok(bands)
}

/// Estimated surfaces of every historical effect, plus main-plus-level sums
/// when requested. Sums are named `main+effect`.
pub fn export_surfaces(model: &BoostModel, grid: usize, sum: bool) -> Result<Vec<CoefficientSurface>> {
    let mut surfaces = historical_surfaces(model, grid)?;
    if sum {
        let covariate = |name: &str| {
            model.learners.iter().find(|l| l.name == name).and_then(|l| match &l.base {
                BaseSpec::History { covariate, .. } => Some(covariate.clone()),
                BaseSpec::Time { .. } => None,
            })
        };
        let family = |name: &str| model.learners.iter().find(|l| l.name == name).map(|l| l.family);
        let mut sums = Vec::new();
        for main in surfaces.iter().filter(|s| family(&s.effect) == Some(Family::Historical)) {
            for other in surfaces.iter().filter(|s| {
                matches!(family(&s.effect), Some(f) if f.is_historical() && f != Family::Historical)
                    && covariate(&s.effect) == covariate(&main.effect)
            }) {
                if other.s != main.s || other.t != main.t {
                    return Err(Error::DimensionMismatch(format!(
                        "surfaces of '{}' and '{}' use different grids",
                        main.effect, other.effect
                    )));
                }
                sums.push(CoefficientSurface {
                    effect: format!("{}+{}", main.effect, other.effect),
                    values: other.values.iter().map(|v| v + &main.values[0]).collect(),
                    ..other.clone()
                });
            }
        }
        surfaces.extend(sums);
    }
    Ok(surfaces)
}

pub fn cmd_coef(args: &CoefArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    if !args.alpha.is_empty() && args.bands.is_none() {
        return Err(Error::Config("--alpha needs a bootstrap file given by --bands".into()));
    }
    let bands: Option<BootstrapBands> = args.bands.as_deref().map(read_json).transpose()?;
    let surfaces = export_surfaces(&model, args.grid, args.sum)?;
    fs::create_dir_all(&args.out)?;
    let mut w = csv::Writer::from_path(args.out.join("surfaces.csv"))?;
    let mut header: Vec<String> = ["effect", "level", "s", "t", "value", "identified"].map(String::from).to_vec();
    header.extend(args.alpha.iter().map(|&a| alpha_label(a)));
    w.write_record(&header)?;
    for surf in &surfaces {
        let flags: Vec<Option<Vec<DMatrix<bool>>>> = args
            .alpha
            .iter()
            .map(|&a| match bands.as_ref().map(|b| b.effect(&surf.effect)) {
                Some(Ok(e)) => {
                    if e.s.len() != surf.s.len() || e.t.len() != surf.t.len() {
                        return Err(Error::DimensionMismatch(format!(
                            "bands of '{}' use a {}x{} grid",
                            surf.effect,
                            e.s.len(),
                            e.t.len()
                        )));
                    }
                    zero_exclusion(e, a).map(Some)
                }
                _ => Ok(None),
            })
            .collect::<Result<_>>()?;
        for (k, level) in surf.levels.iter().enumerate() {
            for (a, s) in surf.s.iter().enumerate() {
                for (b, t) in surf.t.iter().enumerate() {
                    let mut row = vec![
                        surf.effect.clone(),
                        level.clone(),
                        s.to_string(),
                        t.to_string(),
                        surf.values[k][(a, b)].to_string(),
                        surf.identified[(a, b)].to_string(),
                    ];
                    row.extend(flags.iter().map(|f| f.as_ref().map_or(String::new(), |m| m[k][(a, b)].to_string())));
                    w.write_record(&row)?;
                }
            }
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(args.out.join("curves.csv"))?;
    w.write_record(["effect", "level", "t", "value"])?;
    for (j, l) in model.learners.iter().enumerate() {
        if let BaseSpec::Time { t_basis, .. } = &l.base {
            let t: Vec<f64> = (0..args.grid)
                .map(|k| t_basis.lower() + (t_basis.upper() - t_basis.lower()) * k as f64 / (args.grid - 1) as f64)
                .collect();
            let (levels, curves) = model.effect_curves(j, &t)?;
            for (level, c) in levels.iter().zip(&curves) {
                for (tv, v) in t.iter().zip(c) {
                    w.write_record([l.name.clone(), level.clone(), tv.to_string(), v.to_string()])?;
                }
            }
        }
    }
    w.flush()?;
    println!("{} surfaces -> {}", surfaces.len(), args.out.display());
    Ok(())
}

/// One row of the evaluation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectMetrics {
    pub effect: String,
    pub relimse: f64,
    pub in_model: bool,
    pub fnr: Option<f64>,
    pub fpr: Option<f64>,
}

/// reliMSE of every true historical effect; effects absent from the model
/// are scored as the null estimate.
pub fn evaluate(
    model: &BoostModel,
    truth: &Truth,
    grid: usize,
    bands: Option<&BootstrapBands>,
    alpha: f64,
) -> Result<Vec<EffectMetrics>> {
    let surfaces = historical_surfaces(model, grid)?;
    let mut out = Vec::new();
    for te in &truth.surfaces {
        let est = surfaces.iter().find(|s| s.effect == te.effect);
        let (s, t) = match est {
            Some(e) => (e.s.clone(), e.t.clone()),
            None => {
                let g: Vec<f64> = (0..grid).map(|k| k as f64 / (grid - 1) as f64).collect();
                (g.clone(), g)
            }
        };
        let values: Vec<DMatrix<f64>> = match est {
            Some(e) => te
                .levels
                .iter()
                .map(|lv| {
                    e.level(lv).cloned().ok_or_else(|| Error::UnknownLevel {
                        factor: te.effect.clone(),
                        level: lv.clone(),
                    })
                })
                .collect::<Result<_>>()?,
            None => vec![DMatrix::zeros(s.len(), t.len()); te.levels.len()],
        };
        if let Some(e) = est {
            if e.levels.len() != te.levels.len() {
                return Err(Error::DimensionMismatch(format!(
                    "effect '{}' has {} levels in the model and {} in the truth",
                    te.effect,
                    e.levels.len(),
                    te.levels.len()
                )));
            }
        }
        let relimse = relimse_grid(&values, &te.surfaces, &s, &t)?;
        let (mut fnr, mut fpr) = (None, None);
        if let Some(eb) = bands.and_then(|b| b.effect(&te.effect).ok()) {
            let excl = zero_exclusion(eb, alpha)?;
            let mut fn_sum = 0.0;
            let mut fp_sum = 0.0;
            let mut counted = 0;
            for (k, lv) in te.levels.iter().enumerate() {
                let idx = eb.levels.iter().position(|l| l == lv).ok_or_else(|| Error::UnknownLevel {
                    factor: te.effect.clone(),
                    level: lv.clone(),
                })?;
                let tg = te.surfaces[k].grid(&eb.s, &eb.t);
                let mask = DMatrix::from_fn(eb.s.len(), eb.t.len(), |a, b| te.surfaces[k].in_region(eb.s[a], eb.t[b]));
                if let Ok(r) = detection_metrics(&excl[idx..=idx], &tg, Some(&mask)) {
                    fn_sum += r.fnr[0];
                    fp_sum += r.fpr[0];
                    counted += 1;
                }
            }
            if counted > 0 {
                fnr = Some(fn_sum / counted as f64);
                fpr = Some(fp_sum / counted as f64);
            }
        }
        out.push(EffectMetrics { effect: te.effect.clone(), relimse, in_model: est.is_some(), fnr, fpr });
    }
    Ok(out)
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<Vec<EffectMetrics>> {
    let model = load_model(&args.model)?;
    let truth: Truth = read_json(&args.truth)?;
    let bands: Option<BootstrapBands> = args.bands.as_deref().map(read_json).transpose()?;
    let metrics = evaluate(&model, &truth, args.grid, bands.as_ref(), args.alpha)?;
    let fmt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    let rows: Vec<[String; 5]> = metrics
        .iter()
        .map(|m| [m.effect.clone(), m.relimse.to_string(), m.in_model.to_string(), fmt(m.fnr), fmt(m.fpr)])
        .collect();
    let header = ["effect", "relimse", "in_model", "fnr", "fpr"];
    if let Some(path) = &args.out {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for r in &rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    println!("{}", header.join("\t"));
    for r in &rows {
        println!("{}", r.join("\t"));
    }
    Ok(metrics)
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads > 0 {
        // Fails only when a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match &cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a).map(|_| ()),
        Command::Cv(a) => cmd_cv(a),
        Command::Bootstrap(a) => cmd_bootstrap(a).map(|_| ()),
        Command::Coef(a) => cmd_coef(a),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Template(a) => cmd_template(a),
    }
}

/// Exit status: 0 on success, 2 for invalid input, 3 for numerical failure.
pub fn exit_code(result: &Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is_numerical() => ExitCode::from(3),
        Err(_) => ExitCode::from(2),
    }
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = run(&cli);
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    exit_code(&result)
}

/// Selection counts keyed by effect name.
pub fn selection_table(model: &BoostModel) -> BTreeMap<String, usize> {
    model.learners.iter().map(|l| l.name.clone()).zip(model.selection_counts()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fdgrid::HistoryLimits;

    fn example_config() -> &'static str {
        r#"
schema_version = 1
response = "y"

[boost]
mstop = 50
folds = 0

[[effects]]
name = "intercept"
family = "intercept"

[[effects]]
name = "hist"
family = "historical"
covariate = "x"
limits = { kind = "lead", delta = 0.025 }
s_basis = { n_basis = 6, degree = 3, penalty_order = 1 }
t_basis = { n_basis = 6, degree = 3, penalty_order = 1 }
"#
    }

    #[test]
    fn config_parses_with_defaults() {
        let c = ModelConfig::from_toml(example_config()).unwrap();
        assert_eq!(c.boost.mstop, 50);
        assert_eq!(c.boost.nu, 0.1);
        assert_eq!(c.effects[1].limits, Some(HistoryLimits::Lead { delta: 0.025 }));
        assert_eq!(c.unit(), ResamplingUnit::Curve);
        assert_eq!(ModelConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn config_rejects_bad_structure() {
        let two = example_config().replace("name = \"hist\"\nfamily = \"historical\"", "name = \"i2\"\nfamily = \"intercept\"");
        assert!(matches!(ModelConfig::from_toml(&two), Err(Error::Config(_))));
        let neg = example_config().replace("delta = 0.025", "delta = -1.0");
        assert!(ModelConfig::from_toml(&neg).is_err());
        let unknown = format!("{}\nbogus = 1\n", example_config().replace("[boost]", "bogus_top = 2\n[boost]"));
        assert!(ModelConfig::from_toml(&unknown).is_err());
    }

    #[test]
    fn scenario_configs_round_trip() {
        for sc in Scenario::ALL {
            let c = ModelConfig::new("y", scenario_specs(sc, Some(BasisSize::cubic(10, 1))));
            c.validate().unwrap();
            assert_eq!(ModelConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Ok(())), ExitCode::SUCCESS);
        assert_eq!(exit_code(&Err(Error::Config("x".into()))), ExitCode::from(2));
        assert_eq!(exit_code(&Err(Error::RankDeficient("x".into()))), ExitCode::from(3));
    }

    #[test]
    fn null_model_scores_one_and_truth_scores_zero() {
        let sim = simgen::gen_multimodal(20, 12, 1.0, 5, 1).unwrap();
        let specs = scenario_specs(Scenario::Multimodal, Some(BasisSize::cubic(5, 1)));
        let cfg = BoostConfig { mstop: 10, folds: 0, ..Default::default() };
        let m = Prepared::new(&sim.dataset, &specs).unwrap().fit(&cfg).unwrap().zeroed();
        let r = evaluate(&m, &sim.truth(), 10, None, 5.0).unwrap();
        assert!((r[0].relimse - 1.0).abs() < 1e-12);
        let reduced = Truth { surfaces: vec![], ..sim.truth() };
        assert!(evaluate(&m, &reduced, 10, None, 5.0).unwrap().is_empty());
    }
}
