//! Ingestion and transformation of the outcome panel and the indicator table.
//!
//! The outcome panel is a long CSV of country × cycle × group × domain shares
//! on the percentage scale. The indicator table is a long CSV of
//! country × indicator × year values, paired with a metadata file that says
//! which two years each indicator is differenced over.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::stats;

/// Effective sample size used when clamping shares of exactly 0 or 100%.
pub const CLAMP_N_EFF: f64 = 10_000.0;

/// Default absolute-correlation threshold for [`drop_collinear`].
pub const DEFAULT_COLLINEARITY_THRESHOLD: f64 = 0.95;

#[derive(Debug, Error)]
pub enum PanelError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: {message}")]
    Schema {
        file: String,
        line: u64,
        message: String,
    },
    #[error("{file}:{line}: duplicate row for {key}")]
    Duplicate { file: String, line: u64, key: String },
    #[error("{file}:{line}: value {value} outside [0, 100]")]
    OutOfRange { file: String, line: u64, value: f64 },
    #[error("proportion {0} outside [0, 1]")]
    InvalidProportion(f64),
    #[error("invalid cycle list: {0}")]
    InvalidCycles(String),
    #[error("indicator metadata: {0}")]
    Metadata(String),
    #[error("{country} / {indicator}: end year {end_year} and its substitute are both missing")]
    MissingDifference {
        country: String,
        indicator: String,
        end_year: i32,
    },
    #[error("design matrix has missing cells")]
    IncompleteMatrix,
    #[error("column {0} has zero variance")]
    ZeroVariance(String),
}

/// Trim and NFC-normalize a country label.
pub fn canonical_country(raw: &str) -> String {
    raw.trim().nfc().collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Boys,
    Girls,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Reading,
    Mathematics,
}

impl Group {
    pub const ALL: [Group; 2] = [Group::Boys, Group::Girls];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Boys => "boys",
            Group::Girls => "girls",
        }
    }
}

impl Domain {
    pub const ALL: [Domain; 2] = [Domain::Reading, Domain::Mathematics];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Reading => "reading",
            Domain::Mathematics => "mathematics",
        }
    }
}

impl std::str::FromStr for Group {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "boys" => Ok(Group::Boys),
            "girls" => Ok(Group::Girls),
            other => Err(format!("unknown group `{other}` (expected boys|girls)")),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim() {
            "reading" => Ok(Domain::Reading),
            "mathematics" => Ok(Domain::Mathematics),
            other => Err(format!(
                "unknown domain `{other}` (expected reading|mathematics)"
            )),
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An assessment cycle: calendar year plus its 0-based position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cycle {
    pub year: i32,
    pub index: usize,
}

/// Validated, strictly increasing list of observed cycles.
pub fn make_cycles(years: &[i32]) -> Result<Vec<Cycle>, PanelError> {
    if years.len() < 2 {
        return Err(PanelError::InvalidCycles(
            "at least two cycles are required".into(),
        ));
    }
    if years.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PanelError::InvalidCycles(format!(
            "years must be strictly increasing: {years:?}"
        )));
    }
    Ok(years
        .iter()
        .enumerate()
        .map(|(index, &year)| Cycle { year, index })
        .collect())
}

/// Clamp a share on the unit scale away from the boundaries.
pub fn clamp_proportion(p: f64) -> Result<f64, PanelError> {
    if !(0.0..=1.0).contains(&p) || p.is_nan() {
        return Err(PanelError::InvalidProportion(p));
    }
    let eps = 0.5 / CLAMP_N_EFF;
    Ok(if p == 0.0 {
        eps
    } else if p == 1.0 {
        1.0 - eps
    } else {
        p
    })
}

/// Log-odds of a proportion; 0 and 1 are clamped first.
pub fn logit(p: f64) -> Result<f64, PanelError> {
    let p = clamp_proportion(p)?;
    Ok((p / (1.0 - p)).ln())
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One country's trajectory for a single group and domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeSeries {
    pub country: String,
    pub group: Group,
    pub domain: Domain,
    /// Shares on the unit scale, clamped into (0, 1).
    pub values: Vec<f64>,
    pub logit_values: Vec<f64>,
}

impl OutcomeSeries {
    pub fn from_percentages(
        country: impl Into<String>,
        group: Group,
        domain: Domain,
        pct: &[f64],
    ) -> Result<Self, PanelError> {
        let values = pct
            .iter()
            .map(|p| clamp_proportion(p / 100.0))
            .collect::<Result<Vec<_>, _>>()?;
        let logit_values = values.iter().map(|&p| (p / (1.0 - p)).ln()).collect();
        Ok(OutcomeSeries {
            country: country.into(),
            group,
            domain,
            values,
            logit_values,
        })
    }
}

/// Per-indicator differencing rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndicatorMeta {
    pub name: String,
    pub end_year: i32,
    #[serde(default)]
    pub substitute_year: Option<i32>,
    pub start_year: i32,
    /// Context/Input/Process grouping; carried as metadata only.
    #[serde(default)]
    pub member_model: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct IndicatorMetadataFile {
    #[serde(default, rename = "indicator")]
    pub indicators: Vec<IndicatorMeta>,
}

impl IndicatorMetadataFile {
    pub fn from_toml_str(s: &str) -> Result<Self, PanelError> {
        let parsed: IndicatorMetadataFile =
            toml::from_str(s).map_err(|e| PanelError::Metadata(e.to_string()))?;
        let mut seen = HashSet::new();
        for m in &parsed.indicators {
            if !seen.insert(m.name.as_str()) {
                return Err(PanelError::Metadata(format!(
                    "indicator `{}` listed twice",
                    m.name
                )));
            }
            if m.end_year <= m.start_year {
                return Err(PanelError::Metadata(format!(
                    "indicator `{}`: end_year must be after start_year",
                    m.name
                )));
            }
        }
        Ok(parsed)
    }

    pub fn load(path: &Path) -> Result<Self, PanelError> {
        let text = std::fs::read_to_string(path).map_err(|source| PanelError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("indicator metadata serializes")
    }
}

/// Country × indicator × year values. A missing cell is `None`, whether the
/// CSV had an empty `value` field or no row at all.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorTable {
    pub countries: Vec<String>,
    pub names: Vec<String>,
    pub meta: Vec<IndicatorMeta>,
    raw: Vec<Vec<BTreeMap<i32, f64>>>,
}

impl IndicatorTable {
    pub fn new(countries: Vec<String>, meta: Vec<IndicatorMeta>) -> Self {
        let names = meta.iter().map(|m| m.name.clone()).collect();
        let raw = vec![vec![BTreeMap::new(); meta.len()]; countries.len()];
        IndicatorTable {
            countries,
            names,
            meta,
            raw,
        }
    }

    pub fn set(&mut self, country: usize, indicator: usize, year: i32, value: Option<f64>) {
        let cell = &mut self.raw[country][indicator];
        match value {
            Some(v) => {
                cell.insert(year, v);
            }
            None => {
                cell.remove(&year);
            }
        }
    }

    pub fn value(&self, country: usize, indicator: usize, year: i32) -> Option<f64> {
        self.raw[country][indicator].get(&year).copied()
    }

    fn retain_countries(&mut self, keep: &[String]) {
        let idx: HashMap<&str, usize> = self
            .countries
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let empty = vec![BTreeMap::new(); self.meta.len()];
        self.raw = keep
            .iter()
            .map(|c| idx.get(c.as_str()).map_or_else(|| empty.clone(), |&i| self.raw[i].clone()))
            .collect();
        self.countries = keep.to_vec();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedColumn {
    pub name: String,
    pub reason: String,
}

/// Country × predictor matrix. Cells may be missing until imputation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignMatrix {
    pub countries: Vec<String>,
    pub columns: Vec<String>,
    /// Row-major cells.
    pub cells: Vec<Vec<Option<f64>>>,
    pub dropped: Vec<DroppedColumn>,
}

impl DesignMatrix {
    pub fn from_rows(countries: Vec<String>, columns: Vec<String>, rows: Vec<Vec<f64>>) -> Self {
        let cells = rows
            .into_iter()
            .map(|r| r.into_iter().map(Some).collect())
            .collect();
        DesignMatrix {
            countries,
            columns,
            cells,
            dropped: Vec::new(),
        }
    }

    pub fn n_rows(&self) -> usize {
        self.cells.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn missing_count(&self) -> usize {
        self.cells.iter().flatten().filter(|c| c.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.missing_count() == 0
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        self.cells.iter().map(|r| r[j]).collect()
    }

    /// Dense column, or `None` if any cell is missing.
    pub fn dense_column(&self, j: usize) -> Option<Vec<f64>> {
        self.cells.iter().map(|r| r[j]).collect()
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, PanelError> {
        let (n, q) = (self.n_rows(), self.n_cols());
        let mut m = DMatrix::zeros(n, q);
        for (i, row) in self.cells.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                m[(i, j)] = c.ok_or(PanelError::IncompleteMatrix)?;
            }
        }
        Ok(m)
    }

    pub fn row(&self, i: usize) -> Result<Vec<f64>, PanelError> {
        self.cells[i]
            .iter()
            .map(|c| c.ok_or(PanelError::IncompleteMatrix))
            .collect()
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, countries: &[String]) -> DesignMatrix {
        let idx: HashMap<&str, usize> = self
            .countries
            .iter()
            .enumerate()
            .map(|(i, c)| (c.as_str(), i))
            .collect();
        let cells = countries
            .iter()
            .map(|c| {
                idx.get(c.as_str())
                    .map_or_else(|| vec![None; self.n_cols()], |&i| self.cells[i].clone())
            })
            .collect();
        DesignMatrix {
            countries: countries.to_vec(),
            columns: self.columns.clone(),
            cells,
            dropped: self.dropped.clone(),
        }
    }

    fn keep_columns(&self, keep: &[usize], newly_dropped: Vec<DroppedColumn>) -> DesignMatrix {
        let mut dropped = self.dropped.clone();
        dropped.extend(newly_dropped);
        DesignMatrix {
            countries: self.countries.clone(),
            columns: keep.iter().map(|&j| self.columns[j].clone()).collect(),
            cells: self
                .cells
                .iter()
                .map(|r| keep.iter().map(|&j| r[j]).collect())
                .collect(),
            dropped,
        }
    }

    /// Drop columns whose observed entries are all equal.
    pub fn drop_zero_variance(&self) -> DesignMatrix {
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for j in 0..self.n_cols() {
            let obs: Vec<f64> = self.column(j).into_iter().flatten().collect();
            let constant = obs.windows(2).all(|w| w[0] == w[1]);
            if constant {
                dropped.push(DroppedColumn {
                    name: self.columns[j].clone(),
                    reason: "zero variance".into(),
                });
            } else {
                keep.push(j);
            }
        }
        self.keep_columns(&keep, dropped)
    }
}

/// Options for [`make_difference_variables`].
#[derive(Debug, Clone, Copy)]
pub struct DifferenceOptions {
    /// Use `substitute_year` when `end_year` is missing.
    pub substitute: bool,
    /// Leave cells missing (for later imputation) instead of failing.
    pub allow_missing: bool,
}

impl Default for DifferenceOptions {
    fn default() -> Self {
        DifferenceOptions {
            substitute: true,
            allow_missing: true,
        }
    }
}

/// Build the difference-variable design: value(end) − value(start) per
/// indicator, with neighbor-year substitution for a missing end year.
/// Zero-variance columns are dropped and recorded.
pub fn make_difference_variables(
    table: &IndicatorTable,
    opts: DifferenceOptions,
) -> Result<DesignMatrix, PanelError> {
    let mut cells = vec![vec![None; table.meta.len()]; table.countries.len()];
    for (i, country) in table.countries.iter().enumerate() {
        for (j, meta) in table.meta.iter().enumerate() {
            let end = table.value(i, j, meta.end_year).or_else(|| {
                if opts.substitute {
                    meta.substitute_year.and_then(|y| table.value(i, j, y))
                } else {
                    None
                }
            });
            let start = table.value(i, j, meta.start_year);
            let diff = match (end, start) {
                (Some(e), Some(s)) => Some(e - s),
                _ => None,
            };
            if diff.is_none() && !opts.allow_missing {
                return Err(PanelError::MissingDifference {
                    country: country.clone(),
                    indicator: meta.name.clone(),
                    end_year: meta.end_year,
                });
            }
            cells[i][j] = diff;
        }
    }
    let dm = DesignMatrix {
        countries: table.countries.clone(),
        columns: table.names.clone(),
        cells,
        dropped: Vec::new(),
    };
    Ok(dm.drop_zero_variance())
}

/// Greedy collinearity filter: scan column pairs in order and drop the later
/// column whenever |corr| exceeds `threshold`.
pub fn drop_collinear(x: &DesignMatrix, threshold: f64) -> Result<DesignMatrix, PanelError> {
    let cols: Vec<Vec<f64>> = (0..x.n_cols())
        .map(|j| x.dense_column(j).ok_or(PanelError::IncompleteMatrix))
        .collect::<Result<_, _>>()?;
    let q = cols.len();
    let mut alive = vec![true; q];
    let mut dropped = Vec::new();
    for a in 0..q {
        if !alive[a] {
            continue;
        }
        for b in a + 1..q {
            if !alive[b] {
                continue;
            }
            let r = stats::pearson(&cols[a], &cols[b]);
            if r.abs() > threshold {
                alive[b] = false;
                dropped.push(DroppedColumn {
                    name: x.columns[b].clone(),
                    reason: format!("collinear with `{}` (r = {:.4})", x.columns[a], r),
                });
            }
        }
    }
    let keep: Vec<usize> = (0..q).filter(|&j| alive[j]).collect();
    if keep.is_empty() && q > 0 {
        log::warn!("collinearity filter removed every column");
    }
    Ok(x.keep_columns(&keep, dropped))
}

/// Column means and standard deviations used to z-score predictors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.sds))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Z-score every column (sample sd). Fails on a constant column.
pub fn standardize(x: &DesignMatrix) -> Result<(DesignMatrix, Standardization), PanelError> {
    let mut means = Vec::with_capacity(x.n_cols());
    let mut sds = Vec::with_capacity(x.n_cols());
    for j in 0..x.n_cols() {
        let col = x.dense_column(j).ok_or(PanelError::IncompleteMatrix)?;
        let s = stats::sd(&col);
        if s <= 0.0 || !s.is_finite() {
            return Err(PanelError::ZeroVariance(x.columns[j].clone()));
        }
        means.push(stats::mean(&col));
        sds.push(s);
    }
    let st = Standardization { means, sds };
    let mut out = x.clone();
    for row in &mut out.cells {
        for (j, c) in row.iter_mut().enumerate() {
            *c = c.map(|v| (v - st.means[j]) / st.sds[j]);
        }
    }
    Ok((out, st))
}

/// Settings for [`load_panel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    /// Observed assessment years.
    pub cycles: Vec<i32>,
    /// Optional explicit country list; defaults to outcome-file order.
    #[serde(default)]
    pub countries: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub country: String,
    pub reason: String,
}

/// Validated outcome series and indicator table for the retained countries.
#[derive(Debug, Clone)]
pub struct PanelData {
    pub cycles: Vec<Cycle>,
    pub countries: Vec<String>,
    pub series: Vec<OutcomeSeries>,
    pub indicators: IndicatorTable,
    pub excluded: Vec<Exclusion>,
    pub ignored_indicators: Vec<String>,
}

impl PanelData {
    /// Series for one group × domain in country order.
    pub fn select(&self, group: Group, domain: Domain) -> Vec<OutcomeSeries> {
        self.series
            .iter()
            .filter(|s| s.group == group && s.domain == domain)
            .cloned()
            .collect()
    }
}

struct RawOutcomes {
    order: Vec<String>,
    pct: HashMap<(String, Group, Domain), BTreeMap<i32, f64>>,
}

fn header_index(
    headers: &csv::StringRecord,
    required: &[&str],
    file: &str,
) -> Result<Vec<usize>, PanelError> {
    required
        .iter()
        .map(|name| {
            headers
                .iter()
                .position(|h| h.trim() == *name)
                .ok_or_else(|| PanelError::Schema {
                    file: file.to_string(),
                    line: 1,
                    message: format!("missing column `{name}`"),
                })
        })
        .collect()
}

fn parse_year(s: &str, file: &str, line: u64) -> Result<i32, PanelError> {
    s.trim().parse::<i32>().map_err(|_| PanelError::Schema {
        file: file.to_string(),
        line,
        message: format!("year `{s}` is not an integer"),
    })
}

fn parse_value(s: &str, file: &str, line: u64) -> Result<f64, PanelError> {
    let v = s.trim().parse::<f64>().map_err(|_| PanelError::Schema {
        file: file.to_string(),
        line,
        message: format!("value `{s}` is not a number"),
    })?;
    if !v.is_finite() {
        return Err(PanelError::Schema {
            file: file.to_string(),
            line,
            message: format!("value `{s}` is not finite"),
        });
    }
    Ok(v)
}

fn csv_err(file: &str, e: csv::Error) -> PanelError {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    PanelError::Schema {
        file: file.to_string(),
        line,
        message: e.to_string(),
    }
}

fn read_outcomes<R: Read>(reader: R, file: &str) -> Result<RawOutcomes, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(file, e))?.clone();
    let idx = header_index(
        &headers,
        &["country", "year", "group", "domain", "pct_min_prof"],
        file,
    )?;
    let mut order = Vec::new();
    let mut seen_country = HashSet::new();
    let mut pct: HashMap<(String, Group, Domain), BTreeMap<i32, f64>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(file, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let country = canonical_country(&rec[idx[0]]);
        if country.is_empty() {
            return Err(PanelError::Schema {
                file: file.into(),
                line,
                message: "empty country".into(),
            });
        }
        let year = parse_year(&rec[idx[1]], file, line)?;
        let group: Group = rec[idx[2]].parse().map_err(|message| PanelError::Schema {
            file: file.into(),
            line,
            message,
        })?;
        let domain: Domain = rec[idx[3]].parse().map_err(|message| PanelError::Schema {
            file: file.into(),
            line,
            message,
        })?;
        let value = parse_value(&rec[idx[4]], file, line)?;
        if !(0.0..=100.0).contains(&value) {
            return Err(PanelError::OutOfRange {
                file: file.into(),
                line,
                value,
            });
        }
        if seen_country.insert(country.clone()) {
            order.push(country.clone());
        }
        let slot = pct.entry((country.clone(), group, domain)).or_default();
        if slot.insert(year, value).is_some() {
            return Err(PanelError::Duplicate {
                file: file.into(),
                line,
                key: format!("({country}, {year}, {group}, {domain})"),
            });
        }
    }
    Ok(RawOutcomes { order, pct })
}

struct RawIndicators {
    countries: HashSet<String>,
    values: HashMap<(String, String), BTreeMap<i32, Option<f64>>>,
}

fn read_indicators<R: Read>(reader: R, file: &str) -> Result<RawIndicators, PanelError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| csv_err(file, e))?.clone();
    let idx = header_index(&headers, &["country", "indicator", "year", "value"], file)?;
    let mut countries = HashSet::new();
    let mut values: HashMap<(String, String), BTreeMap<i32, Option<f64>>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(file, e))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let country = canonical_country(&rec[idx[0]]);
        let indicator = rec[idx[1]].trim().to_string();
        let year = parse_year(&rec[idx[2]], file, line)?;
        let raw = rec[idx[3]].trim();
        let value = if raw.is_empty() {
            None
        } else {
            Some(parse_value(raw, file, line)?)
        };
        countries.insert(country.clone());
        let slot = values.entry((country.clone(), indicator.clone())).or_default();
        if slot.insert(year, value).is_some() {
            return Err(PanelError::Duplicate {
                file: file.into(),
                line,
                key: format!("({country}, {indicator}, {year})"),
            });
        }
    }
    Ok(RawIndicators { countries, values })
}

/// Parse and validate both sources from readers.
pub fn load_panel_from_readers<R1: Read, R2: Read>(
    outcomes: R1,
    outcome_name: &str,
    indicators: Option<(R2, &str)>,
    meta: &IndicatorMetadataFile,
    config: &PanelConfig,
) -> Result<PanelData, PanelError> {
    let cycles = make_cycles(&config.cycles)?;
    let raw = read_outcomes(outcomes, outcome_name)?;
    let raw_ind = match indicators {
        Some((r, name)) => Some(read_indicators(r, name)?),
        None => None,
    };

    let candidates: Vec<String> = match &config.countries {
        Some(list) => list.iter().map(|c| canonical_country(c)).collect(),
        None => raw.order.clone(),
    };

    let mut excluded = Vec::new();
    let mut countries = Vec::new();
    let mut series = Vec::new();
    'country: for country in &candidates {
        let mut mine = Vec::new();
        for group in Group::ALL {
            for domain in Domain::ALL {
                let Some(by_year) = raw.pct.get(&(country.clone(), group, domain)) else {
                    excluded.push(Exclusion {
                        country: country.clone(),
                        reason: format!("no outcome rows for {group}/{domain}"),
                    });
                    continue 'country;
                };
                let mut pct = Vec::with_capacity(cycles.len());
                for c in &cycles {
                    match by_year.get(&c.year) {
                        Some(v) => pct.push(*v),
                        None => {
                            excluded.push(Exclusion {
                                country: country.clone(),
                                reason: format!("missing {} for {group}/{domain}", c.year),
                            });
                            continue 'country;
                        }
                    }
                }
                mine.push(OutcomeSeries::from_percentages(
                    country.clone(),
                    group,
                    domain,
                    &pct,
                )?);
            }
        }
        if let Some(ri) = &raw_ind {
            if !ri.countries.contains(country) {
                excluded.push(Exclusion {
                    country: country.clone(),
                    reason: "absent from indicator file".into(),
                });
                continue;
            }
        }
        countries.push(country.clone());
        series.extend(mine);
    }
    for c in &raw.order {
        if !candidates.contains(c) {
            excluded.push(Exclusion {
                country: c.clone(),
                reason: "not in configured country list".into(),
            });
        }
    }

    let mut table = IndicatorTable::new(candidates.clone(), meta.indicators.clone());
    let mut ignored = Vec::new();
    if let Some(ri) = &raw_ind {
        let known: HashSet<&str> = meta.indicators.iter().map(|m| m.name.as_str()).collect();
        let mut unknown: Vec<String> = ri
            .values
            .keys()
            .map(|(_, ind)| ind.clone())
            .filter(|ind| !known.contains(ind.as_str()))
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        unknown.sort();
        ignored = unknown;
        for (ci, country) in candidates.iter().enumerate() {
            for (ii, m) in meta.indicators.iter().enumerate() {
                if let Some(years) = ri.values.get(&(country.clone(), m.name.clone())) {
                    for (&y, &v) in years {
                        table.set(ci, ii, y, v);
                    }
                }
            }
        }
    }
    table.retain_countries(&countries);

    Ok(PanelData {
        cycles,
        countries,
        series,
        indicators: table,
        excluded,
        ignored_indicators: ignored,
    })
}

fn open(path: &Path) -> Result<std::fs::File, PanelError> {
    std::fs::File::open(path).map_err(|source| PanelError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Load the outcome CSV and (optionally) the indicator CSV from disk.
pub fn load_panel(
    outcome_csv: &Path,
    indicator_csv: Option<&Path>,
    meta: &IndicatorMetadataFile,
    config: &PanelConfig,
) -> Result<PanelData, PanelError> {
    let out = open(outcome_csv)?;
    let out_name = outcome_csv.display().to_string();
    match indicator_csv {
        Some(p) => {
            let ind = open(p)?;
            let name = p.display().to_string();
            load_panel_from_readers(out, &out_name, Some((ind, name.as_str())), meta, config)
        }
        None => load_panel_from_readers(
            out,
            &out_name,
            None::<(std::fs::File, &str)>,
            meta,
            config,
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CYCLES: [i32; 5] = [2009, 2012, 2015, 2018, 2022];

    fn cfg() -> PanelConfig {
        PanelConfig {
            cycles: CYCLES.to_vec(),
            countries: None,
        }
    }

    fn outcome_csv(countries: &[&str], pct: f64) -> String {
        let mut s = String::from("country,year,group,domain,pct_min_prof\n");
        for c in countries {
            for g in ["boys", "girls"] {
                for d in ["reading", "mathematics"] {
                    for y in CYCLES {
                        s.push_str(&format!("{c},{y},{g},{d},{pct}\n"));
                    }
                }
            }
        }
        s
    }

    fn load(outcomes: &str) -> Result<PanelData, PanelError> {
        load_panel_from_readers(
            outcomes.as_bytes(),
            "outcomes.csv",
            None::<(&[u8], &str)>,
            &IndicatorMetadataFile::default(),
            &cfg(),
        )
    }

    #[test]
    fn fifty_percent_maps_to_zero_logit() {
        let p = load(&outcome_csv(&["Albania"], 50.0)).unwrap();
        assert_eq!(p.series.len(), 4);
        for s in &p.series {
            assert!(s.logit_values.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn duplicate_row_is_rejected() {
        let mut csv = outcome_csv(&["Albania"], 40.0);
        csv.push_str("Albania,2012,boys,reading,41\n");
        match load(&csv) {
            Err(PanelError::Duplicate { key, .. }) => assert!(key.contains("Albania, 2012")),
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_and_schema_errors() {
        let csv = "country,year,group,domain,pct_min_prof\nAlbania,2009,boys,reading,100.5\n";
        assert!(matches!(load(csv), Err(PanelError::OutOfRange { line: 2, .. })));
        let csv = "country,year,group,pct_min_prof\nAlbania,2009,boys,50\n";
        assert!(matches!(load(csv), Err(PanelError::Schema { line: 1, .. })));
        let csv = "country,year,group,domain,pct_min_prof\nAlbania,2009,men,reading,50\n";
        assert!(matches!(load(csv), Err(PanelError::Schema { line: 2, .. })));
    }

    #[test]
    fn incomplete_country_is_excluded_and_reported() {
        let mut csv = outcome_csv(&["Albania", "Peru"], 40.0);
        csv = csv
            .lines()
            .filter(|l| !l.starts_with("Peru,2015,girls,reading"))
            .collect::<Vec<_>>()
            .join("\n");
        let p = load(&csv).unwrap();
        assert_eq!(p.countries, vec!["Albania"]);
        assert_eq!(p.excluded.len(), 1);
        assert_eq!(p.excluded[0].country, "Peru");
    }

    #[test]
    fn country_labels_are_canonicalized() {
        // "Cura\u{e7}ao" composed vs decomposed, with stray whitespace.
        let a = canonical_country("  Cura\u{0063}\u{0327}ao ");
        let b = canonical_country("Cura\u{e7}ao");
        assert_eq!(a, b);
    }

    #[test]
    fn boundary_shares_are_clamped() {
        let s = OutcomeSeries::from_percentages("X", Group::Boys, Domain::Reading, &[0.0, 100.0])
            .unwrap();
        assert_eq!(s.values[0], 0.5 / CLAMP_N_EFF);
        assert_eq!(s.values[1], 1.0 - 0.5 / CLAMP_N_EFF);
        assert!(s.logit_values.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn logit_values() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        // ln(0.8245 / 0.1755), evaluated at 30 significant digits
        assert!((logit(0.8245).unwrap() - 1.547_138_099_093_733).abs() < 1e-13);
        assert!(logit(1.2).is_err());
        assert!(logit(-0.1).is_err());
    }

    #[test]
    fn logit_round_trip_on_random_points() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
            worst = worst.max((inv_logit(logit(p).unwrap()) - p).abs());
        }
        assert!(worst < 1e-12, "{worst}");
    }

    fn meta(name: &str, end: i32, sub: Option<i32>, start: i32) -> IndicatorMeta {
        IndicatorMeta {
            name: name.into(),
            end_year: end,
            substitute_year: sub,
            start_year: start,
            member_model: None,
        }
    }

    #[test]
    fn difference_variables() {
        let mut t = IndicatorTable::new(
            vec!["A".into(), "B".into(), "C".into()],
            vec![
                meta("gdp", 2021, None, 2009),
                meta("enrol", 2022, Some(2021), 2009),
                meta("const", 2022, None, 2009),
            ],
        );
        t.set(0, 0, 2021, Some(1.2));
        t.set(0, 0, 2009, Some(1.0));
        t.set(1, 0, 2021, Some(2.0));
        t.set(1, 0, 2009, Some(1.0));
        // country A: 2022 missing, 2021 present
        t.set(0, 1, 2021, Some(5.0));
        t.set(0, 1, 2009, Some(3.0));
        t.set(1, 1, 2022, Some(4.0));
        t.set(1, 1, 2009, Some(3.5));
        t.set(2, 0, 2021, Some(0.0));
        t.set(2, 0, 2009, Some(0.0));
        t.set(2, 1, 2022, Some(1.0));
        t.set(2, 1, 2009, Some(0.0));
        for c in 0..3 {
            t.set(c, 2, 2022, Some(7.0));
            t.set(c, 2, 2009, Some(7.0));
        }
        let dm = make_difference_variables(&t, DifferenceOptions::default()).unwrap();
        assert_eq!(dm.columns, vec!["gdp", "enrol"]);
        assert!((dm.cells[0][0].unwrap() - 0.2).abs() < 1e-12);
        assert_eq!(dm.cells[0][1], Some(2.0));
        assert_eq!(dm.dropped[0].name, "const");
        assert_eq!(dm.dropped[0].reason, "zero variance");

        let strict = DifferenceOptions {
            substitute: false,
            allow_missing: false,
        };
        assert!(matches!(
            make_difference_variables(&t, strict),
            Err(PanelError::MissingDifference { .. })
        ));
        let no_sub = DifferenceOptions {
            substitute: false,
            allow_missing: true,
        };
        let dm = make_difference_variables(&t, no_sub).unwrap();
        assert_eq!(dm.cells[0][1], None);
    }

    #[test]
    fn collinear_duplicates_drop_the_later_column() {
        let rows = vec![
            vec![1.0, 1.0, 0.5],
            vec![2.0, 2.0, -0.5],
            vec![3.0, 3.0, -0.5],
            vec![4.0, 4.0, 0.5],
        ];
        let x = DesignMatrix::from_rows(
            (0..4).map(|i| format!("c{i}")).collect(),
            vec!["a".into(), "b".into(), "c".into()],
            rows,
        );
        let out = drop_collinear(&x, 0.95).unwrap();
        assert_eq!(out.columns, vec!["a", "c"]);
        assert_eq!(out.dropped.len(), 1);
        assert!(out.dropped[0].reason.contains("`a`"));
        // a and c are orthogonal, nothing further to drop
        let again = drop_collinear(&out, 0.95).unwrap();
        assert_eq!(again, out);
    }

    #[test]
    fn standardization_zero_mean_unit_sd() {
        let x = DesignMatrix::from_rows(
            vec!["a".into(), "b".into(), "c".into()],
            vec!["v".into()],
            vec![vec![1.0], vec![2.0], vec![6.0]],
        );
        let (z, st) = standardize(&x).unwrap();
        let col = z.dense_column(0).unwrap();
        assert!(stats::mean(&col).abs() < 1e-15);
        assert!((stats::sd(&col) - 1.0).abs() < 1e-15);
        assert_eq!(st.apply(&[st.means[0]]), vec![0.0]);
    }

    proptest! {
        #[test]
        fn differences_are_translation_invariant(
            vals in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..10),
            shift in -100.0f64..100.0,
        ) {
            let countries: Vec<String> = (0..vals.len()).map(|i| format!("c{i}")).collect();
            let build = |c: f64| {
                let mut t = IndicatorTable::new(countries.clone(), vec![meta("v", 2022, None, 2009)]);
                for (i, (e, s)) in vals.iter().enumerate() {
                    t.set(i, 0, 2022, Some(e + c));
                    t.set(i, 0, 2009, Some(s + c));
                }
                make_difference_variables(&t, DifferenceOptions::default()).unwrap()
            };
            let a = build(0.0);
            let b = build(shift);
            prop_assert_eq!(a.columns.len(), b.columns.len());
            for (ra, rb) in a.cells.iter().zip(&b.cells) {
                for (x, y) in ra.iter().zip(rb) {
                    prop_assert!((x.unwrap() - y.unwrap()).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn drop_collinear_is_idempotent(
            rows in proptest::collection::vec(proptest::collection::vec(-5.0f64..5.0, 5), 6..20),
            thr in 0.3f64..0.99,
        ) {
            let n = rows.len();
            let mut rows = rows;
            // plant a near-duplicate column
            for r in rows.iter_mut() { r[4] = r[0] * 2.0 + 1.0; }
            let x = DesignMatrix::from_rows(
                (0..n).map(|i| format!("c{i}")).collect(),
                (0..5).map(|j| format!("v{j}")).collect(),
                rows,
            );
            let once = drop_collinear(&x, thr).unwrap();
            let twice = drop_collinear(&once, thr).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn logit_inverse_pair(p in 1e-9f64..(1.0 - 1e-9)) {
            prop_assert!((inv_logit(logit(p).unwrap()) - p).abs() < 1e-12);
        }
    }
}
