//! Functional observations on grids: integration weights, integration limits
//! of historical effects, and long-format data ingestion.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance (in units of the covariate grid range) used when
/// testing whether a grid point lies inside integration limits.
pub const LIMIT_EPS: f64 = 1e-9;

/// Marker for a missing response value in the long format.
pub const MISSING: &str = "NA";

/// Trapezoid-rule weights for strictly increasing points.
pub fn trapezoid_weights(points: &[f64]) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::InvalidGrid(format!(
            "need at least 2 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidGrid("grid contains non-finite points".into()));
    }
    if points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid("points must be strictly increasing".into()));
    }
    let d = points.len();
    let mut w = vec![0.0; d];
    w[0] = (points[1] - points[0]) / 2.0;
    w[d - 1] = (points[d - 1] - points[d - 2]) / 2.0;
    for r in 1..d - 1 {
        w[r] = (points[r + 1] - points[r - 1]) / 2.0;
    }
    Ok(w)
}

/// An ordered grid with its trapezoid integration weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        let weights = trapezoid_weights(&points)?;
        Ok(Self { points, weights })
    }

    /// `n` equidistant points on `[lo, hi]`.
    pub fn equidistant(lo: f64, hi: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 points, got {n}")));
        }
        let step = (hi - lo) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| lo + step * i as f64).collect();
        points[n - 1] = hi;
        Self::new(points)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn first(&self) -> f64 {
        self.points[0]
    }

    pub fn last(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    pub fn range(&self) -> f64 {
        self.last() - self.first()
    }
}

/// Integration limits `[l(t), u(t)]` of a historical effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HistoryLimits {
    /// `l(t) = T₁`, `u(t) = t − δ`.
    Lead { delta: f64 },
    /// Partial history `l(t) = t − δ_l`, `u(t) = t − δ_u`.
    Window { lower_lag: f64, upper_lag: f64 },
}

impl HistoryLimits {
    pub fn validate(&self) -> Result<()> {
        match *self {
            HistoryLimits::Lead { delta } if delta >= 0.0 && delta.is_finite() => Ok(()),
            HistoryLimits::Lead { delta } => {
                Err(Error::InvalidInput(format!("lead delta must be >= 0, got {delta}")))
            }
            HistoryLimits::Window { lower_lag, upper_lag }
                if upper_lag >= 0.0 && lower_lag > upper_lag && lower_lag.is_finite() =>
            {
                Ok(())
            }
            HistoryLimits::Window { lower_lag, upper_lag } => Err(Error::InvalidInput(format!(
                "window lags must satisfy lower_lag > upper_lag >= 0, got ({lower_lag}, {upper_lag})"
            ))),
        }
    }

    /// `(l(t), u(t))`, with `s_start` the first point of the covariate grid.
    pub fn bounds(&self, t: f64, s_start: f64) -> (f64, f64) {
        match *self {
            HistoryLimits::Lead { delta } => (s_start, t - delta),
            HistoryLimits::Window { lower_lag, upper_lag } => (t - lower_lag, t - upper_lag),
        }
    }

    /// Whether `s` lies in `[l(t), u(t)]`, with a tolerance of
    /// `LIMIT_EPS * scale`.
    pub fn contains(&self, s: f64, t: f64, s_start: f64, scale: f64) -> bool {
        let (l, u) = self.bounds(t, s_start);
        let eps = LIMIT_EPS * scale.abs().max(f64::MIN_POSITIVE);
        s >= l - eps && s <= u + eps
    }
}

/// The covariate row `x(s_r) · I{l(t) ≤ s_r ≤ u(t)}`.
pub fn truncate_history(values: &[f64], grid: &TimeGrid, limits: &HistoryLimits, t: f64) -> Vec<f64> {
    let s0 = grid.first();
    let scale = grid.range();
    grid.points()
        .iter()
        .zip(values)
        .map(|(&s, &x)| if limits.contains(s, t, s0, scale) { x } else { 0.0 })
        .collect()
}

/// Errors with [`Error::EmptyHistory`] when no covariate grid point is inside
/// the limits for any of the given response times.
pub fn check_history(grid: &TimeGrid, limits: &HistoryLimits, times: &[f64]) -> Result<()> {
    limits.validate()?;
    let s0 = grid.first();
    let scale = grid.range();
    let any = times
        .iter()
        .any(|&t| grid.points().iter().any(|&s| limits.contains(s, t, s0, scale)));
    if any {
        Ok(())
    } else {
        Err(Error::EmptyHistory)
    }
}

/// A functional covariate observed on one grid shared by all curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalCovariate {
    pub name: String,
    pub grid: TimeGrid,
    /// `n × R` matrix of `x_i(s_r)`.
    pub values: DMatrix<f64>,
}

impl FunctionalCovariate {
    pub fn new(name: impl Into<String>, grid: TimeGrid, values: DMatrix<f64>) -> Result<Self> {
        let name = name.into();
        if values.ncols() != grid.len() {
            return Err(Error::DimensionMismatch(format!(
                "covariate '{name}' has {} columns but its grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("covariate '{name}' has non-finite values")));
        }
        Ok(Self { name, grid, values })
    }

    pub fn n_curves(&self) -> usize {
        self.values.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.values.row(i).iter().cloned().collect()
    }
}

/// A categorical covariate with one level per curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalCovariate {
    pub name: String,
    /// Level labels; codes index into this list.
    pub labels: Vec<String>,
    /// Level code per curve.
    pub codes: Vec<usize>,
}

impl CategoricalCovariate {
    /// Build from per-curve labels; levels are sorted lexicographically.
    pub fn from_labels<S: AsRef<str>>(name: impl Into<String>, per_curve: &[S]) -> Result<Self> {
        let name = name.into();
        let set: BTreeSet<&str> = per_curve.iter().map(|s| s.as_ref()).collect();
        if set.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidInput(format!("empty level label in '{name}'")));
        }
        let labels: Vec<String> = set.iter().map(|s| s.to_string()).collect();
        let index: HashMap<&str, usize> =
            labels.iter().enumerate().map(|(k, s)| (s.as_str(), k)).collect();
        let codes = per_curve.iter().map(|s| index[s.as_ref()]).collect();
        Ok(Self { name, labels, codes })
    }

    /// Build from explicit labels and codes (levels may be empty).
    pub fn from_codes(name: impl Into<String>, labels: Vec<String>, codes: Vec<usize>) -> Result<Self> {
        let name = name.into();
        if let Some(&c) = codes.iter().find(|&&c| c >= labels.len()) {
            return Err(Error::InvalidInput(format!("code {c} out of range for '{name}'")));
        }
        Ok(Self { name, labels, codes })
    }

    pub fn n_levels(&self) -> usize {
        self.labels.len()
    }

    /// Curve counts per level (ψ).
    pub fn psi(&self) -> Vec<f64> {
        self.weighted_psi(&vec![1.0; self.codes.len()])
    }

    /// Sampling-weighted curve counts per level.
    pub fn weighted_psi(&self, weights: &[f64]) -> Vec<f64> {
        let mut psi = vec![0.0; self.labels.len()];
        for (&c, &w) in self.codes.iter().zip(weights) {
            psi[c] += w;
        }
        psi
    }

    pub fn code_of(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }
}

/// One response curve on its own grid. Missing values are stored as NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseCurve {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl ResponseCurve {
    pub fn is_observed(&self, d: usize) -> bool {
        self.values[d].is_finite()
    }
}

/// Response curves plus covariates and per-curve sampling weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionalDataset {
    pub response_name: String,
    pub curve_ids: Vec<String>,
    pub response: Vec<ResponseCurve>,
    pub functional: Vec<FunctionalCovariate>,
    pub categorical: Vec<CategoricalCovariate>,
    pub weights: Vec<f64>,
}

impl FunctionalDataset {
    pub fn new(
        response_name: impl Into<String>,
        curve_ids: Vec<String>,
        response: Vec<ResponseCurve>,
        functional: Vec<FunctionalCovariate>,
        categorical: Vec<CategoricalCovariate>,
    ) -> Result<Self> {
        let n = response.len();
        let ds = Self {
            response_name: response_name.into(),
            curve_ids,
            response,
            functional,
            categorical,
            weights: vec![1.0; n],
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.response.len();
        if n == 0 {
            return Err(Error::InvalidInput("dataset has no curves".into()));
        }
        if self.curve_ids.len() != n || self.weights.len() != n {
            return Err(Error::DimensionMismatch("curve ids / weights length differs from n".into()));
        }
        for c in &self.response {
            if c.values.len() != c.grid.len() {
                return Err(Error::DimensionMismatch("response values differ from grid length".into()));
            }
        }
        for f in &self.functional {
            if f.n_curves() != n {
                return Err(Error::DimensionMismatch(format!(
                    "covariate '{}' has {} curves, expected {n}",
                    f.name,
                    f.n_curves()
                )));
            }
        }
        for c in &self.categorical {
            if c.codes.len() != n {
                return Err(Error::DimensionMismatch(format!(
                    "categorical '{}' has {} curves, expected {n}",
                    c.name,
                    c.codes.len()
                )));
            }
        }
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput("sampling weights must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn n_curves(&self) -> usize {
        self.response.len()
    }

    /// Total number of scalar response observations `N` (grid points,
    /// including missing ones).
    pub fn n_obs(&self) -> usize {
        self.response.iter().map(|c| c.grid.len()).sum()
    }

    /// Start offset of each curve in the stacked observation vector, plus a
    /// final entry equal to `N`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = Vec::with_capacity(self.n_curves() + 1);
        let mut acc = 0;
        off.push(0);
        for c in &self.response {
            acc += c.grid.len();
            off.push(acc);
        }
        off
    }

    pub fn obs_times(&self) -> Vec<f64> {
        self.response.iter().flat_map(|c| c.grid.points().iter().cloned()).collect()
    }

    /// Stacked response values with missing entries replaced by 0.
    pub fn obs_values(&self) -> Vec<f64> {
        self.response
            .iter()
            .flat_map(|c| c.values.iter().map(|v| if v.is_finite() { *v } else { 0.0 }))
            .collect()
    }

    /// Stacked integration weights Υ(t_{i,d}); 0 where the response is missing.
    pub fn obs_integration_weights(&self) -> Vec<f64> {
        self.response
            .iter()
            .flat_map(|c| {
                c.grid
                    .weights()
                    .iter()
                    .zip(&c.values)
                    .map(|(w, v)| if v.is_finite() { *w } else { 0.0 })
            })
            .collect()
    }

    /// Smallest and largest response time over all curves.
    pub fn time_range(&self) -> (f64, f64) {
        let lo = self.response.iter().map(|c| c.grid.first()).fold(f64::INFINITY, f64::min);
        let hi = self.response.iter().map(|c| c.grid.last()).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }

    pub fn functional(&self, name: &str) -> Result<&FunctionalCovariate> {
        self.functional
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    pub fn categorical(&self, name: &str) -> Result<&CategoricalCovariate> {
        self.categorical
            .iter()
            .find(|f| f.name == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Copy with replaced sampling weights.
    pub fn with_weights(&self, weights: Vec<f64>) -> Result<Self> {
        let mut out = self.clone();
        out.weights = weights;
        out.validate()?;
        Ok(out)
    }
}

/// One row of the long format `curve_id,variable,time,value`; `value` is
/// `None` for the missing marker.
#[derive(Debug, Clone, PartialEq)]
pub struct LongRecord {
    pub curve_id: String,
    pub variable: String,
    pub time: f64,
    pub value: Option<f64>,
}

/// One row of the categorical companion format `curve_id,variable,level`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelRecord {
    pub curve_id: String,
    pub variable: String,
    pub level: String,
}

/// Assemble and validate a dataset from long-format records.
pub fn load_dataset(
    records: &[LongRecord],
    levels: &[LevelRecord],
    response_name: &str,
) -> Result<FunctionalDataset> {
    let mut curve_index: HashMap<&str, usize> = HashMap::new();
    let mut curve_ids: Vec<String> = Vec::new();
    let mut var_order: Vec<&str> = Vec::new();
    // (curve, variable) -> [(time, value)]
    let mut cells: HashMap<(usize, &str), Vec<(f64, Option<f64>)>> = HashMap::new();
    for r in records {
        if !r.time.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite time for curve {}", r.curve_id)));
        }
        let next = curve_ids.len();
        let ci = *curve_index.entry(r.curve_id.as_str()).or_insert_with(|| {
            curve_ids.push(r.curve_id.clone());
            next
        });
        if !var_order.contains(&r.variable.as_str()) {
            var_order.push(r.variable.as_str());
        }
        cells.entry((ci, r.variable.as_str())).or_default().push((r.time, r.value));
    }
    let n = curve_ids.len();
    if n == 0 {
        return Err(Error::InvalidInput("no records".into()));
    }
    for v in cells.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    for ((ci, var), v) in &cells {
        if v.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidInput(format!(
                "duplicate record for curve '{}', variable '{var}'",
                curve_ids[*ci]
            )));
        }
    }

    let mut response = Vec::with_capacity(n);
    for (ci, id) in curve_ids.iter().enumerate() {
        let obs = cells.get(&(ci, response_name)).ok_or_else(|| {
            Error::InvalidInput(format!("curve '{id}' has no response '{response_name}' records"))
        })?;
        let grid = TimeGrid::new(obs.iter().map(|o| o.0).collect())?;
        let values = obs.iter().map(|o| o.1.unwrap_or(f64::NAN)).collect();
        response.push(ResponseCurve { grid, values });
    }

    let mut functional = Vec::new();
    for var in var_order.iter().filter(|v| **v != response_name) {
        let first = cells.get(&(0, *var)).ok_or_else(|| {
            Error::InvalidInput(format!("covariate '{var}' missing for curve '{}'", curve_ids[0]))
        })?;
        let points: Vec<f64> = first.iter().map(|o| o.0).collect();
        let grid = TimeGrid::new(points.clone())?;
        let mut values = DMatrix::zeros(n, points.len());
        for ci in 0..n {
            let obs = cells.get(&(ci, *var)).ok_or_else(|| {
                Error::InvalidInput(format!("covariate '{var}' missing for curve '{}'", curve_ids[ci]))
            })?;
            if obs.len() != points.len() || obs.iter().zip(&points).any(|(o, p)| o.0 != *p) {
                return Err(Error::InvalidGrid(format!(
                    "covariate '{var}' has an inconsistent grid for curve '{}'",
                    curve_ids[ci]
                )));
            }
            for (r, o) in obs.iter().enumerate() {
                values[(ci, r)] = o.1.ok_or_else(|| {
                    Error::InvalidInput(format!(
                        "missing value in covariate '{var}' for curve '{}'",
                        curve_ids[ci]
                    ))
                })?;
            }
        }
        functional.push(FunctionalCovariate::new(*var, grid, values)?);
    }

    let mut cat_order: Vec<&str> = Vec::new();
    let mut cat_cells: HashMap<(&str, usize), &str> = HashMap::new();
    for r in levels {
        let ci = *curve_index.get(r.curve_id.as_str()).ok_or_else(|| {
            Error::InvalidInput(format!(
                "categorical '{}' refers to unknown curve '{}'",
                r.variable, r.curve_id
            ))
        })?;
        if !cat_order.contains(&r.variable.as_str()) {
            cat_order.push(r.variable.as_str());
        }
        if cat_cells.insert((r.variable.as_str(), ci), r.level.as_str()).is_some() {
            return Err(Error::InvalidInput(format!(
                "duplicate categorical record for curve '{}', variable '{}'",
                r.curve_id, r.variable
            )));
        }
    }
    let mut categorical = Vec::new();
    for var in cat_order {
        let mut per_curve = Vec::with_capacity(n);
        for (ci, id) in curve_ids.iter().enumerate() {
            let level = cat_cells.get(&(var, ci)).ok_or_else(|| {
                Error::InvalidInput(format!("categorical '{var}' has no level for curve '{id}'"))
            })?;
            per_curve.push(*level);
        }
        categorical.push(CategoricalCovariate::from_labels(var, &per_curve)?);
    }

    FunctionalDataset::new(response_name, curve_ids, response, functional, categorical)
}

fn parse_value(s: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s == MISSING {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::InvalidInput(format!("cannot parse value '{s}'")))
}

/// Read the long-format CSV (and optional categorical companion CSV).
pub fn read_dataset_csv(
    data_path: &Path,
    categorical_path: Option<&Path>,
    response_name: &str,
) -> Result<FunctionalDataset> {
    let mut rdr = csv::Reader::from_path(data_path)?;
    let header = rdr.headers()?.clone();
    let expected = ["curve_id", "variable", "time", "value"];
    if header.iter().map(str::trim).ne(expected.iter().copied()) {
        return Err(Error::InvalidInput(format!(
            "expected header curve_id,variable,time,value in {}",
            data_path.display()
        )));
    }
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::InvalidInput("long-format row must have 4 fields".into()));
        }
        let time = row[2]
            .trim()
            .parse::<f64>()
            .map_err(|_| Error::InvalidInput(format!("cannot parse time '{}'", &row[2])))?;
        records.push(LongRecord {
            curve_id: row[0].to_string(),
            variable: row[1].to_string(),
            time,
            value: parse_value(&row[3])?,
        });
    }
    let mut levels = Vec::new();
    if let Some(p) = categorical_path {
        let mut rdr = csv::Reader::from_path(p)?;
        let header = rdr.headers()?.clone();
        if header.iter().map(str::trim).ne(["curve_id", "variable", "level"].iter().copied()) {
            return Err(Error::InvalidInput(format!(
                "expected header curve_id,variable,level in {}",
                p.display()
            )));
        }
        for row in rdr.records() {
            let row = row?;
            levels.push(LevelRecord {
                curve_id: row[0].to_string(),
                variable: row[1].to_string(),
                level: row[2].to_string(),
            });
        }
    }
    load_dataset(&records, &levels, response_name)
}

/// Long-format records for a dataset, in curve order.
pub fn to_records(ds: &FunctionalDataset) -> (Vec<LongRecord>, Vec<LevelRecord>) {
    let mut recs = Vec::new();
    let mut levels = Vec::new();
    for (i, id) in ds.curve_ids.iter().enumerate() {
        let curve = &ds.response[i];
        for (t, v) in curve.grid.points().iter().zip(&curve.values) {
            recs.push(LongRecord {
                curve_id: id.clone(),
                variable: ds.response_name.clone(),
                time: *t,
                value: v.is_finite().then_some(*v),
            });
        }
        for f in &ds.functional {
            for (r, s) in f.grid.points().iter().enumerate() {
                recs.push(LongRecord {
                    curve_id: id.clone(),
                    variable: f.name.clone(),
                    time: *s,
                    value: Some(f.values[(i, r)]),
                });
            }
        }
        for c in &ds.categorical {
            levels.push(LevelRecord {
                curve_id: id.clone(),
                variable: c.name.clone(),
                level: c.labels[c.codes[i]].clone(),
            });
        }
    }
    (recs, levels)
}

/// Write the dataset as long-format CSV plus, when it has categorical
/// covariates, the companion CSV.
pub fn write_dataset_csv(ds: &FunctionalDataset, data_path: &Path, categorical_path: &Path) -> Result<()> {
    let (recs, levels) = to_records(ds);
    let mut w = csv::Writer::from_path(data_path)?;
    w.write_record(["curve_id", "variable", "time", "value"])?;
    for r in &recs {
        let value = match r.value {
            Some(v) => format!("{v}"),
            None => MISSING.to_string(),
        };
        w.write_record([r.curve_id.as_str(), r.variable.as_str(), &format!("{}", r.time), &value])?;
    }
    w.flush()?;
    if !ds.categorical.is_empty() {
        let mut w = csv::Writer::from_path(categorical_path)?;
        w.write_record(["curve_id", "variable", "level"])?;
        for l in &levels {
            w.write_record([l.curve_id.as_str(), l.variable.as_str(), l.level.as_str()])?;
        }
        w.flush()?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(c: &str, v: &str, t: f64, x: Option<f64>) -> LongRecord {
        LongRecord { curve_id: c.into(), variable: v.into(), time: t, value: x }
    }

    #[test]
    fn trapezoid_examples() {
        assert_eq!(trapezoid_weights(&[0.0, 0.5, 1.0]).unwrap(), vec![0.25, 0.5, 0.25]);
        assert_eq!(trapezoid_weights(&[0.0, 1.0]).unwrap(), vec![0.5, 0.5]);
        let w = trapezoid_weights(&[0.0, 0.5, 0.6]).unwrap();
        for (a, b) in w.iter().zip([0.25, 0.3, 0.05]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn trapezoid_errors() {
        assert!(trapezoid_weights(&[0.0]).is_err());
        assert!(trapezoid_weights(&[0.0, 0.0]).is_err());
        assert!(trapezoid_weights(&[0.0, 1.0, 0.5]).is_err());
    }

    #[test]
    fn truncation_examples() {
        let grid = TimeGrid::new(vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]).unwrap();
        let x = [1.0; 4];
        let lead = HistoryLimits::Lead { delta: 0.025 };
        assert_eq!(truncate_history(&x, &grid, &lead, 0.5), vec![1.0, 1.0, 0.0, 0.0]);
        let full = HistoryLimits::Lead { delta: 0.0 };
        assert_eq!(truncate_history(&x, &grid, &full, 1.0), x.to_vec());
        assert_eq!(truncate_history(&x, &grid, &lead, 0.02), vec![0.0; 4]);
        assert!(matches!(check_history(&grid, &lead, &[0.0, 0.01]), Err(Error::EmptyHistory)));
        assert!(check_history(&grid, &lead, &[0.0, 0.5]).is_ok());
    }

    #[test]
    fn window_limits() {
        let grid = TimeGrid::equidistant(0.0, 1.0, 11).unwrap();
        let w = HistoryLimits::Window { lower_lag: 0.3, upper_lag: 0.1 };
        let row = truncate_history(&[1.0; 11], &grid, &w, 0.8);
        // s in [0.5, 0.7]
        assert_eq!(row, vec![0., 0., 0., 0., 0., 1., 1., 1., 0., 0., 0.]);
        assert!(HistoryLimits::Window { lower_lag: 0.1, upper_lag: 0.3 }.validate().is_err());
        assert!(HistoryLimits::Lead { delta: -0.1 }.validate().is_err());
    }

    #[test]
    fn load_dimensions_and_psi() {
        let mut recs = Vec::new();
        for c in ["a", "b"] {
            for (k, t) in [0.0, 0.5, 1.0].iter().enumerate() {
                recs.push(rec(c, "Y", *t, Some(k as f64)));
                recs.push(rec(c, "X", *t, Some(1.0)));
            }
        }
        let ds = load_dataset(&recs, &[], "Y").unwrap();
        assert_eq!(ds.n_curves(), 2);
        assert_eq!(ds.response[0].grid.len(), 3);
        assert_eq!(ds.functional[0].grid.len(), 3);

        let cat = CategoricalCovariate::from_labels("z", &["A", "A", "B"]).unwrap();
        assert_eq!(cat.psi(), vec![2.0, 1.0]);
    }

    #[test]
    fn load_rejects_duplicates_and_bad_grids() {
        let recs = vec![
            rec("a", "Y", 0.0, Some(1.0)),
            rec("a", "Y", 1.0, Some(1.0)),
            rec("a", "Y", 1.0, Some(2.0)),
        ];
        assert!(load_dataset(&recs, &[], "Y").is_err());

        let recs = vec![
            rec("a", "Y", 0.0, Some(1.0)),
            rec("a", "Y", 1.0, Some(1.0)),
            rec("a", "X", 0.0, Some(1.0)),
            rec("a", "X", 1.0, Some(1.0)),
            rec("b", "Y", 0.0, Some(1.0)),
            rec("b", "Y", 1.0, Some(1.0)),
            rec("b", "X", 0.0, Some(1.0)),
            rec("b", "X", 0.5, Some(1.0)),
        ];
        assert!(matches!(load_dataset(&recs, &[], "Y"), Err(Error::InvalidGrid(_))));
    }

    #[test]
    fn missing_response_marker() {
        let recs = vec![
            rec("a", "Y", 0.0, Some(1.0)),
            rec("a", "Y", 0.5, None),
            rec("a", "Y", 1.0, Some(3.0)),
        ];
        let ds = load_dataset(&recs, &[], "Y").unwrap();
        assert_eq!(ds.obs_integration_weights(), vec![0.25, 0.0, 0.25]);
        assert_eq!(ds.obs_values(), vec![1.0, 0.0, 3.0]);
        // a curve without any response records is rejected
        let recs = vec![rec("a", "X", 0.0, Some(1.0)), rec("a", "X", 1.0, Some(1.0))];
        assert!(load_dataset(&recs, &[], "Y").is_err());
    }

    #[test]
    fn categorical_companion_checks() {
        let recs = vec![rec("a", "Y", 0.0, Some(1.0)), rec("a", "Y", 1.0, Some(1.0))];
        let bad = vec![LevelRecord { curve_id: "zz".into(), variable: "g".into(), level: "A".into() }];
        assert!(load_dataset(&recs, &bad, "Y").is_err());
        let ok = vec![LevelRecord { curve_id: "a".into(), variable: "g".into(), level: "A".into() }];
        let ds = load_dataset(&recs, &ok, "Y").unwrap();
        assert_eq!(ds.categorical[0].labels, vec!["A".to_string()]);
    }
}
