//! Bayesian hierarchical latent growth curve model on logit-scale shares.
//!
//! For country `i` and cycle `t`,
//!
//! ```text
//! y_it = π0_i + λ_t π1_i + ε_it,     ε_it ~ N(0, σ_t²)
//! η_i = (π0_i, π1_i)' ~ N(Γ x_i, Σ_η)
//! vec(Γ) ~ N(Ω, Σ_Γ),  Σ_η ~ IW(R_η, ν_η),  σ_t ~ half-Cauchy(μ_y, σ_y)
//! ```
//!
//! where `x_i = (1, x_i1, …, x_iQ)`. Slope loadings `λ_t` are either fixed
//! or free; free loadings carry a normal prior. The sampler is
//! Metropolis-within-Gibbs: conjugate draws for `η`, `Γ` and `Σ_η`, slice
//! sampling on `log σ_t`, and an adaptive random-walk step for each free
//! loading (adapted during burn-in only).

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{cholesky_with_jitter, sample_canonical, sample_wishart};
use crate::panel::{inv_logit, DesignMatrix, OutcomeSeries};
use crate::stats::{self, Summary};

#[derive(Debug, Error)]
pub enum GrowthError {
    #[error("invalid loading specification: {0}")]
    InvalidLoadings(String),
    #[error("invalid priors: {0}")]
    InvalidPriors(String),
    #[error("invalid MCMC configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid data: {0}")]
    InvalidData(String),
    #[error("matrix could not be made positive definite in {0}")]
    NotPositiveDefinite(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpecLabel {
    M0,
    M1,
    M2,
    Custom,
}

impl fmt::Display for SpecLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpecLabel::M0 => "M0",
            SpecLabel::M1 => "M1",
            SpecLabel::M2 => "M2",
            SpecLabel::Custom => "custom",
        })
    }
}

impl std::str::FromStr for SpecLabel {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "m0" => Ok(SpecLabel::M0),
            "m1" => Ok(SpecLabel::M1),
            "m2" => Ok(SpecLabel::M2),
            other => Err(format!("unknown model `{other}` (expected m0|m1|m2)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loading {
    Fixed(f64),
    Free,
}

/// Slope loadings `λ_t`, one per cycle. The intercept column is implicitly
/// all ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadingSpec {
    pub label: SpecLabel,
    pub loadings: Vec<Loading>,
}

impl LoadingSpec {
    /// Linear growth: every loading fixed at its cycle index.
    pub fn m0(n_cycles: usize) -> Result<Self, GrowthError> {
        Self::with_free_mask(SpecLabel::M0, &vec![false; n_cycles])
    }

    /// Latent basis with the last loading free.
    pub fn m1(n_cycles: usize) -> Result<Self, GrowthError> {
        let mut mask = vec![false; n_cycles];
        if let Some(last) = mask.last_mut() {
            *last = true;
        }
        Self::with_free_mask(SpecLabel::M1, &mask)
    }

    /// Latent basis with the last two loadings free.
    pub fn m2(n_cycles: usize) -> Result<Self, GrowthError> {
        let mut mask = vec![false; n_cycles];
        for m in mask.iter_mut().rev().take(2) {
            *m = true;
        }
        Self::with_free_mask(SpecLabel::M2, &mask)
    }

    pub fn from_label(label: SpecLabel, n_cycles: usize) -> Result<Self, GrowthError> {
        match label {
            SpecLabel::M0 => Self::m0(n_cycles),
            SpecLabel::M1 => Self::m1(n_cycles),
            SpecLabel::M2 => Self::m2(n_cycles),
            SpecLabel::Custom => Err(GrowthError::InvalidLoadings(
                "custom specifications need an explicit mask".into(),
            )),
        }
    }

    /// Fixed entries take their cycle index; `true` in the mask frees an entry.
    pub fn with_free_mask(label: SpecLabel, free: &[bool]) -> Result<Self, GrowthError> {
        let loadings = free
            .iter()
            .enumerate()
            .map(|(t, &f)| if f { Loading::Free } else { Loading::Fixed(t as f64) })
            .collect();
        let spec = LoadingSpec { label, loadings };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), GrowthError> {
        let fixed: Vec<f64> = self
            .loadings
            .iter()
            .filter_map(|l| match l {
                Loading::Fixed(v) => Some(*v),
                Loading::Free => None,
            })
            .collect();
        if fixed.len() < 2 {
            return Err(GrowthError::InvalidLoadings(
                "at least two slope loadings must be fixed".into(),
            ));
        }
        if fixed.iter().any(|v| !v.is_finite()) {
            return Err(GrowthError::InvalidLoadings("non-finite fixed loading".into()));
        }
        if fixed.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GrowthError::InvalidLoadings(
                "fixed loadings must be strictly increasing".into(),
            ));
        }
        Ok(())
    }

    pub fn n_cycles(&self) -> usize {
        self.loadings.len()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        self.loadings
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Loading::Free))
            .map(|(t, _)| t)
            .collect()
    }

    /// Value of the least-squares line through the fixed loadings, evaluated
    /// at cycle position `t`. For the standard specifications this is `t`.
    pub fn linear_extrapolation(&self, t: usize) -> f64 {
        let pts: Vec<(f64, f64)> = self
            .loadings
            .iter()
            .enumerate()
            .filter_map(|(i, l)| match l {
                Loading::Fixed(v) => Some((i as f64, *v)),
                Loading::Free => None,
            })
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
        my + sxy / sxx * (t as f64 - mx)
    }

    /// Starting values: fixed values, with free entries at their linear
    /// extrapolation.
    pub fn initial_values(&self) -> Vec<f64> {
        self.loadings
            .iter()
            .enumerate()
            .map(|(t, l)| match l {
                Loading::Fixed(v) => *v,
                Loading::Free => self.linear_extrapolation(t),
            })
            .collect()
    }
}

/// Prior hyperparameters. `Σ_Γ` is `gamma_var · I` unless `gamma_cov` is
/// supplied; `Ω` is zero unless `gamma_mean` is supplied. Both are in the
/// order `(β_00, β_01, …, β_0Q, β_10, …, β_1Q)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrowthPriors {
    pub gamma_mean: Option<Vec<f64>>,
    pub gamma_var: f64,
    pub gamma_cov: Option<Vec<Vec<f64>>>,
    pub resid_location: f64,
    pub resid_scale: f64,
    pub eta_scale: [[f64; 2]; 2],
    /// Inverse-Wishart degrees of freedom; `None` means dimension + 2.
    pub eta_df: Option<f64>,
    /// Prior means for free loadings, in cycle order of the free entries;
    /// `None` means the linear extrapolation of the fixed loadings.
    pub free_loading_mean: Option<Vec<f64>>,
    pub free_loading_sd: f64,
}

impl Default for GrowthPriors {
    fn default() -> Self {
        GrowthPriors {
            gamma_mean: None,
            gamma_var: 100.0,
            gamma_cov: None,
            resid_location: 0.0,
            resid_scale: 2.5,
            eta_scale: [[1.0, 0.0], [0.0, 1.0]],
            eta_df: None,
            free_loading_mean: None,
            free_loading_sd: 10.0,
        }
    }
}

impl GrowthPriors {
    pub fn eta_df(&self) -> f64 {
        self.eta_df.unwrap_or(4.0)
    }

    fn resolve(&self, n_gamma: usize, spec: &LoadingSpec) -> Result<ResolvedPriors, GrowthError> {
        if !(self.resid_scale > 0.0) {
            return Err(GrowthError::InvalidPriors("resid_scale must be > 0".into()));
        }
        if !(self.free_loading_sd > 0.0) {
            return Err(GrowthError::InvalidPriors(
                "free_loading_sd must be > 0".into(),
            ));
        }
        let df = self.eta_df();
        if !(df >= 2.0) {
            return Err(GrowthError::InvalidPriors(
                "eta_df must be at least the dimension of Σ_η (2)".into(),
            ));
        }
        let r = DMatrix::from_fn(2, 2, |i, j| self.eta_scale[i][j]);
        if (r[(0, 1)] - r[(1, 0)]).abs() > 1e-12 || r.clone().cholesky().is_none() {
            return Err(GrowthError::InvalidPriors(
                "eta_scale must be symmetric positive definite".into(),
            ));
        }
        let omega = match &self.gamma_mean {
            Some(m) if m.len() != n_gamma => {
                return Err(GrowthError::InvalidPriors(format!(
                    "gamma_mean has {} entries, expected {n_gamma}",
                    m.len()
                )))
            }
            Some(m) => DVector::from_vec(m.clone()),
            None => DVector::zeros(n_gamma),
        };
        let cov = match &self.gamma_cov {
            Some(rows) => {
                if rows.len() != n_gamma || rows.iter().any(|r| r.len() != n_gamma) {
                    return Err(GrowthError::InvalidPriors(format!(
                        "gamma_cov must be {n_gamma} x {n_gamma}"
                    )));
                }
                DMatrix::from_fn(n_gamma, n_gamma, |i, j| rows[i][j])
            }
            None => {
                if !(self.gamma_var > 0.0) {
                    return Err(GrowthError::InvalidPriors("gamma_var must be > 0".into()));
                }
                DMatrix::identity(n_gamma, n_gamma) * self.gamma_var
            }
        };
        if (&cov - cov.transpose()).amax() > 1e-10 * cov.amax() {
            return Err(GrowthError::InvalidPriors("gamma_cov must be symmetric".into()));
        }
        let gamma_prec = cov
            .cholesky()
            .ok_or_else(|| GrowthError::InvalidPriors("gamma_cov must be positive definite".into()))?
            .inverse();
        let free = spec.free_indices();
        let free_mean = match &self.free_loading_mean {
            Some(m) if m.len() != free.len() => {
                return Err(GrowthError::InvalidPriors(format!(
                    "free_loading_mean has {} entries, expected {}",
                    m.len(),
                    free.len()
                )))
            }
            Some(m) => m.clone(),
            None => free.iter().map(|&t| spec.linear_extrapolation(t)).collect(),
        };
        let gamma_prec_mean = &gamma_prec * &omega;
        Ok(ResolvedPriors {
            gamma_prec,
            gamma_prec_mean,
            resid_location: self.resid_location,
            resid_scale: self.resid_scale,
            eta_scale: r,
            eta_df: df,
            free_mean,
            free_sd: self.free_loading_sd,
        })
    }
}

struct ResolvedPriors {
    gamma_prec: DMatrix<f64>,
    gamma_prec_mean: DVector<f64>,
    resid_location: f64,
    resid_scale: f64,
    eta_scale: DMatrix<f64>,
    eta_df: f64,
    free_mean: Vec<f64>,
    free_sd: f64,
}

/// Sampler settings. `iterations` counts every iteration including the
/// `burn_in` ones; `(iterations - burn_in) / thin` draws are kept per chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McmcConfig {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    pub target_acceptance: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            chains: 4,
            iterations: 10_000,
            burn_in: 5_000,
            thin: 1,
            seed: 20_240_601,
            target_acceptance: 0.44,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<(), GrowthError> {
        if self.chains == 0 {
            return Err(GrowthError::InvalidConfig("chains must be >= 1".into()));
        }
        if self.thin == 0 {
            return Err(GrowthError::InvalidConfig("thin must be >= 1".into()));
        }
        if self.burn_in >= self.iterations {
            return Err(GrowthError::InvalidConfig(
                "burn_in must be smaller than iterations".into(),
            ));
        }
        if !(0.0 < self.target_acceptance && self.target_acceptance < 1.0) {
            return Err(GrowthError::InvalidConfig(
                "target_acceptance must lie in (0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Logit-scale panel for one group × domain, plus optional country-level
/// predictors (without the intercept column).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthData {
    pub countries: Vec<String>,
    pub cycle_years: Vec<i32>,
    /// `y[i][t]`, logit scale.
    pub y: Vec<Vec<f64>>,
    pub predictor_names: Vec<String>,
    /// `x[i][q]`.
    pub x: Vec<Vec<f64>>,
}

impl GrowthData {
    pub fn new(
        countries: Vec<String>,
        cycle_years: Vec<i32>,
        y: Vec<Vec<f64>>,
    ) -> Result<Self, GrowthError> {
        let d = GrowthData {
            x: vec![Vec::new(); countries.len()],
            countries,
            cycle_years,
            y,
            predictor_names: Vec::new(),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn from_series(
        series: &[OutcomeSeries],
        cycle_years: &[i32],
    ) -> Result<Self, GrowthError> {
        Self::new(
            series.iter().map(|s| s.country.clone()).collect(),
            cycle_years.to_vec(),
            series.iter().map(|s| s.logit_values.clone()).collect(),
        )
    }

    /// Attach predictors; rows are matched to countries by name.
    pub fn with_predictors(mut self, x: &DesignMatrix) -> Result<Self, GrowthError> {
        if !x.is_complete() {
            return Err(GrowthError::InvalidData(
                "predictor matrix has missing cells".into(),
            ));
        }
        let mut rows = Vec::with_capacity(self.countries.len());
        for c in &self.countries {
            let r = x.countries.iter().position(|k| k == c).ok_or_else(|| {
                GrowthError::InvalidData(format!("no predictor row for country `{c}`"))
            })?;
            rows.push(x.row(r).map_err(|e| GrowthError::InvalidData(e.to_string()))?);
        }
        self.predictor_names = x.columns.clone();
        self.x = rows;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), GrowthError> {
        let n = self.countries.len();
        let t = self.cycle_years.len();
        if n < 2 {
            return Err(GrowthError::InvalidData("need at least two countries".into()));
        }
        if t < 2 {
            return Err(GrowthError::InvalidData("need at least two cycles".into()));
        }
        if self.y.len() != n || self.y.iter().any(|r| r.len() != t) {
            return Err(GrowthError::InvalidData(
                "every country needs one value per cycle".into(),
            ));
        }
        if self.y.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GrowthError::InvalidData("non-finite logit value".into()));
        }
        let q = self.predictor_names.len();
        if self.x.len() != n || self.x.iter().any(|r| r.len() != q) {
            return Err(GrowthError::InvalidData(
                "predictor rows do not align with countries".into(),
            ));
        }
        if self.x.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GrowthError::InvalidData("non-finite predictor value".into()));
        }
        Ok(())
    }

    pub fn n_countries(&self) -> usize {
        self.countries.len()
    }

    pub fn n_cycles(&self) -> usize {
        self.cycle_years.len()
    }

    pub fn n_predictors(&self) -> usize {
        self.predictor_names.len()
    }

    fn design_row(&self, i: usize) -> DVector<f64> {
        let q = self.n_predictors();
        DVector::from_fn(q + 1, |k, _| if k == 0 { 1.0 } else { self.x[i][k - 1] })
    }
}

/// What leave-one-out leaves out: a whole country (its cycles jointly, with
/// `η_i` integrated out) or a single country × cycle cell conditional on
/// `η_i`. Conditioning on `η_i` with five cycles per country makes most
/// cells highly influential, so the country is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LooUnit {
    #[default]
    Country,
    Cell,
}

impl fmt::Display for LooUnit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LooUnit::Country => "country",
            LooUnit::Cell => "cell",
        })
    }
}

/// Layout of the flat per-draw parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub names: Vec<String>,
    pub n_countries: usize,
    pub n_coef: usize,
    pub n_cycles: usize,
    pub free: Vec<usize>,
}

impl ParamLayout {
    fn new(data: &GrowthData, spec: &LoadingSpec) -> Self {
        let mut names = Vec::new();
        for c in &data.countries {
            names.push(format!("pi0[{c}]"));
        }
        for c in &data.countries {
            names.push(format!("pi1[{c}]"));
        }
        for row in 0..2 {
            names.push(format!("beta{row}0"));
            for p in &data.predictor_names {
                names.push(format!("beta{row}[{p}]"));
            }
        }
        names.push("sigma2_eta0".into());
        names.push("sigma_eta01".into());
        names.push("sigma2_eta1".into());
        for y in &data.cycle_years {
            names.push(format!("sigma_y[{y}]"));
        }
        let free = spec.free_indices();
        for &t in &free {
            names.push(format!("lambda[{}]", data.cycle_years[t]));
        }
        ParamLayout {
            names,
            n_countries: data.n_countries(),
            n_coef: data.n_predictors() + 1,
            n_cycles: data.n_cycles(),
            free,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn pi0(&self, i: usize) -> usize {
        i
    }
    pub fn pi1(&self, i: usize) -> usize {
        self.n_countries + i
    }
    /// Index of `Γ[row, k]`; `k = 0` is the intercept.
    pub fn gamma(&self, row: usize, k: usize) -> usize {
        2 * self.n_countries + row * self.n_coef + k
    }
    pub fn sigma_eta(&self) -> usize {
        2 * self.n_countries + 2 * self.n_coef
    }
    pub fn sigma_y(&self, t: usize) -> usize {
        self.sigma_eta() + 3 + t
    }
    pub fn lambda_free(&self, j: usize) -> usize {
        self.sigma_y(self.n_cycles) + j
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower95: f64,
    pub upper95: f64,
    pub rhat: f64,
    pub ess: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountrySlope {
    pub country: String,
    pub mean: f64,
    pub sd: f64,
    pub lower95: f64,
    pub upper95: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    /// Acceptance rates of the free-loading steps after burn-in, per chain.
    pub loading_acceptance: Vec<Vec<f64>>,
    /// Number of Cholesky factorizations that needed diagonal jitter.
    pub jitter_repairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthPosterior {
    pub spec: LoadingSpec,
    pub data: GrowthData,
    pub mcmc: McmcConfig,
    pub layout: ParamLayout,
    /// `chains[c][s * layout.len() + p]`.
    pub chains: Vec<Vec<f64>>,
    pub stats: SamplerStats,
}

/// Fit the growth model with country-level predictors taken from `data.x`
/// (which may have zero columns).
pub fn fit_growth(
    data: &GrowthData,
    spec: &LoadingSpec,
    priors: &GrowthPriors,
    mcmc: &McmcConfig,
) -> Result<GrowthPosterior, GrowthError> {
    data.validate()?;
    spec.validate()?;
    mcmc.validate()?;
    if spec.n_cycles() != data.n_cycles() {
        return Err(GrowthError::InvalidData(format!(
            "loading specification has {} cycles, data has {}",
            spec.n_cycles(),
            data.n_cycles()
        )));
    }
    let layout = ParamLayout::new(data, spec);
    let resolved = priors.resolve(2 * layout.n_coef, spec)?;
    let pre = Precomputed::new(data);
    let results: Vec<Result<ChainOutput, GrowthError>> = (0..mcmc.chains)
        .into_par_iter()
        .map(|c| run_chain(data, spec, &resolved, &pre, &layout, mcmc, c))
        .collect();
    let mut chains = Vec::with_capacity(mcmc.chains);
    let mut stats = SamplerStats::default();
    for r in results {
        let out = r?;
        chains.push(out.draws);
        stats.loading_acceptance.push(out.acceptance);
        stats.jitter_repairs += out.jitter_repairs;
    }
    if stats.jitter_repairs > 0 {
        log::warn!(
            "growth sampler: {} covariance factorizations needed jitter",
            stats.jitter_repairs
        );
    }
    Ok(GrowthPosterior {
        spec: spec.clone(),
        data: data.clone(),
        mcmc: mcmc.clone(),
        layout,
        chains,
        stats,
    })
}

/// Fit without predictors: `Γ` reduces to the grand means `β_00`, `β_10`.
pub fn unconditional_growth(
    data: &GrowthData,
    spec: &LoadingSpec,
    priors: &GrowthPriors,
    mcmc: &McmcConfig,
) -> Result<GrowthPosterior, GrowthError> {
    let mut d = data.clone();
    d.predictor_names.clear();
    d.x = vec![Vec::new(); d.n_countries()];
    fit_growth(&d, spec, priors, mcmc)
}

pub fn posterior_slopes(post: &GrowthPosterior) -> Vec<CountrySlope> {
    post.data
        .countries
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let s = Summary::from_draws(&post.pooled(post.layout.pi1(i)));
            CountrySlope {
                country: c.clone(),
                mean: s.mean,
                sd: s.sd,
                lower95: s.lower95,
                upper95: s.upper95,
            }
        })
        .collect()
}

struct Precomputed {
    xtx: DMatrix<f64>,
}

impl Precomputed {
    fn new(data: &GrowthData) -> Self {
        let p = data.n_predictors() + 1;
        let mut xtx = DMatrix::zeros(p, p);
        for i in 0..data.n_countries() {
            let x = data.design_row(i);
            xtx += &x * x.transpose();
        }
        Precomputed { xtx }
    }
}

struct ChainOutput {
    draws: Vec<f64>,
    acceptance: Vec<f64>,
    jitter_repairs: usize,
}

struct State {
    eta: Vec<[f64; 2]>,
    /// `Γ` flattened row-major: `(β_00..β_0Q, β_10..β_1Q)`.
    gamma: DVector<f64>,
    sigma_eta: DMatrix<f64>,
    sigma_y: Vec<f64>,
    lambda: Vec<f64>,
}

fn initial_state(data: &GrowthData, spec: &LoadingSpec, rng: &mut ChaCha8Rng) -> State {
    let n = data.n_countries();
    let t_n = data.n_cycles();
    let p = data.n_predictors() + 1;
    let lambda = spec.initial_values();
    // Per-country least squares on (1, λ_t).
    let lm = stats::mean(&lambda);
    let sxx: f64 = lambda.iter().map(|l| (l - lm) * (l - lm)).sum();
    let mut eta = Vec::with_capacity(n);
    for i in 0..n {
        let ym = stats::mean(&data.y[i]);
        let sxy: f64 = lambda.iter().zip(&data.y[i]).map(|(l, y)| (l - lm) * (y - ym)).sum();
        let b = sxy / sxx;
        eta.push([ym - b * lm, b]);
    }
    let mut sigma_y = Vec::with_capacity(t_n);
    for t in 0..t_n {
        let ss: f64 = (0..n)
            .map(|i| {
                let r = data.y[i][t] - eta[i][0] - lambda[t] * eta[i][1];
                r * r
            })
            .sum();
        let jitter: f64 = rng.sample::<f64, _>(StandardNormal) * 0.3;
        sigma_y.push((ss / n as f64).sqrt().max(1e-3) * jitter.exp());
    }
    let e0: Vec<f64> = eta.iter().map(|e| e[0]).collect();
    let e1: Vec<f64> = eta.iter().map(|e| e[1]).collect();
    let v0 = stats::variance(&e0).max(1e-4);
    let v1 = stats::variance(&e1).max(1e-4);
    let mut gamma = DVector::zeros(2 * p);
    gamma[0] = stats::mean(&e0) + rng.sample::<f64, _>(StandardNormal) * 0.5 * v0.sqrt();
    gamma[p] = stats::mean(&e1) + rng.sample::<f64, _>(StandardNormal) * 0.5 * v1.sqrt();
    let sigma_eta = DMatrix::from_row_slice(2, 2, &[v0, 0.0, 0.0, v1]);
    State {
        eta,
        gamma,
        sigma_eta,
        sigma_y,
        lambda,
    }
}

fn run_chain(
    data: &GrowthData,
    spec: &LoadingSpec,
    pr: &ResolvedPriors,
    pre: &Precomputed,
    layout: &ParamLayout,
    mcmc: &McmcConfig,
    chain: usize,
) -> Result<ChainOutput, GrowthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mcmc.seed);
    rng.set_stream(chain as u64);
    let mut st = initial_state(data, spec, &mut rng);
    let n = data.n_countries();
    let t_n = data.n_cycles();
    let p = layout.n_coef;
    let free = &layout.free;
    let mut log_step = vec![(0.1f64).ln(); free.len()];
    let mut batch_acc = vec![0usize; free.len()];
    let mut kept_acc = vec![0usize; free.len()];
    let mut batches = 0usize;
    const BATCH: usize = 50;
    let mut jitter_repairs = 0usize;
    let mut draws = Vec::with_capacity(mcmc.kept_per_chain() * layout.len());

    for iter in 0..mcmc.iterations {
        // η_i | rest
        let se_inv = invert_2x2(&st.sigma_eta);
        let mut a = [[0.0f64; 2]; 2];
        for t in 0..t_n {
            let w = 1.0 / (st.sigma_y[t] * st.sigma_y[t]);
            let l = st.lambda[t];
            a[0][0] += w;
            a[0][1] += w * l;
            a[1][1] += w * l * l;
        }
        a[1][0] = a[0][1];
        let prec = DMatrix::from_fn(2, 2, |r, c| a[r][c] + se_inv[(r, c)]);
        let (chol, j) = cholesky_with_jitter(&prec).ok_or(GrowthError::NotPositiveDefinite("η update"))?;
        jitter_repairs += (j > 0.0) as usize;
        for i in 0..n {
            let x = data.design_row(i);
            let m0 = st.gamma.rows(0, p).dot(&x);
            let m1 = st.gamma.rows(p, p).dot(&x);
            let mut b0 = se_inv[(0, 0)] * m0 + se_inv[(0, 1)] * m1;
            let mut b1 = se_inv[(1, 0)] * m0 + se_inv[(1, 1)] * m1;
            for t in 0..t_n {
                let w = 1.0 / (st.sigma_y[t] * st.sigma_y[t]);
                b0 += w * data.y[i][t];
                b1 += w * st.lambda[t] * data.y[i][t];
            }
            let d = sample_canonical(&chol, &DVector::from_vec(vec![b0, b1]), &mut rng);
            st.eta[i] = [d[0], d[1]];
        }

        // Γ | η, Σ_η: precision Σ_Γ⁻¹ + Σ_η⁻¹ ⊗ XᵀX
        let mut prec = pr.gamma_prec.clone();
        for r in 0..2 {
            for c in 0..2 {
                let s = se_inv[(r, c)];
                let mut block = prec.view_mut((r * p, c * p), (p, p));
                block += &pre.xtx * s;
            }
        }
        let mut b = pr.gamma_prec_mean.clone();
        for i in 0..n {
            let x = data.design_row(i);
            let v0 = se_inv[(0, 0)] * st.eta[i][0] + se_inv[(0, 1)] * st.eta[i][1];
            let v1 = se_inv[(1, 0)] * st.eta[i][0] + se_inv[(1, 1)] * st.eta[i][1];
            for k in 0..p {
                b[k] += v0 * x[k];
                b[p + k] += v1 * x[k];
            }
        }
        let (chol, j) = cholesky_with_jitter(&prec).ok_or(GrowthError::NotPositiveDefinite("Γ update"))?;
        jitter_repairs += (j > 0.0) as usize;
        st.gamma = sample_canonical(&chol, &b, &mut rng);

        // Σ_η | η, Γ ~ IW(R + S, ν + N)
        let mut s = pr.eta_scale.clone();
        for i in 0..n {
            let x = data.design_row(i);
            let e0 = st.eta[i][0] - st.gamma.rows(0, p).dot(&x);
            let e1 = st.eta[i][1] - st.gamma.rows(p, p).dot(&x);
            s[(0, 0)] += e0 * e0;
            s[(0, 1)] += e0 * e1;
            s[(1, 0)] += e0 * e1;
            s[(1, 1)] += e1 * e1;
        }
        let s_inv = invert_2x2(&s);
        let (chol, j) = cholesky_with_jitter(&s_inv).ok_or(GrowthError::NotPositiveDefinite("Σ_η update"))?;
        jitter_repairs += (j > 0.0) as usize;
        let w = sample_wishart(&chol.l(), pr.eta_df + n as f64, &mut rng);
        st.sigma_eta = invert_2x2(&w);
        if st.sigma_eta.clone().cholesky().is_none() {
            let (c, _) = cholesky_with_jitter(&st.sigma_eta)
                .ok_or(GrowthError::NotPositiveDefinite("Σ_η draw"))?;
            st.sigma_eta = c.l() * c.l().transpose();
            jitter_repairs += 1;
        }

        // σ_t | rest: slice sampling on log σ_t
        for t in 0..t_n {
            let ss: f64 = (0..n)
                .map(|i| {
                    let r = data.y[i][t] - st.eta[i][0] - st.lambda[t] * st.eta[i][1];
                    r * r
                })
                .sum();
            let (loc, scale) = (pr.resid_location, pr.resid_scale);
            let logf = |u: f64| -> f64 {
                let sigma = u.exp();
                let z = (sigma - loc) / scale;
                -(n as f64) * u - ss / (2.0 * sigma * sigma) - (1.0 + z * z).ln() + u
            };
            st.sigma_y[t] = slice_sample(st.sigma_y[t].ln(), logf, 1.0, &mut rng).exp();
        }

        // free loadings: random-walk Metropolis
        for (j, &t) in free.iter().enumerate() {
            let w = 1.0 / (st.sigma_y[t] * st.sigma_y[t]);
            let (m, sd) = (pr.free_mean[j], pr.free_sd);
            let logf = |l: f64| -> f64 {
                let mut ll = 0.0;
                for i in 0..n {
                    let r = data.y[i][t] - st.eta[i][0] - l * st.eta[i][1];
                    ll -= 0.5 * w * r * r;
                }
                ll - 0.5 * ((l - m) / sd).powi(2)
            };
            let cur = st.lambda[t];
            let prop = cur + log_step[j].exp() * rng.sample::<f64, _>(StandardNormal);
            let accept = rng.random::<f64>().ln() < logf(prop) - logf(cur);
            if accept {
                st.lambda[t] = prop;
                if iter < mcmc.burn_in {
                    batch_acc[j] += 1;
                } else {
                    kept_acc[j] += 1;
                }
            }
        }
        if iter < mcmc.burn_in && (iter + 1) % BATCH == 0 && !free.is_empty() {
            batches += 1;
            let delta = (1.0 / (batches as f64).sqrt()).min(0.1);
            for j in 0..free.len() {
                let rate = batch_acc[j] as f64 / BATCH as f64;
                log_step[j] += if rate > mcmc.target_acceptance { delta } else { -delta };
                batch_acc[j] = 0;
            }
        }

        if iter >= mcmc.burn_in && (iter - mcmc.burn_in) % mcmc.thin == 0 && draws.len() < mcmc.kept_per_chain() * layout.len() {
            for i in 0..n {
                draws.push(st.eta[i][0]);
            }
            for i in 0..n {
                draws.push(st.eta[i][1]);
            }
            draws.extend(st.gamma.iter());
            draws.push(st.sigma_eta[(0, 0)]);
            draws.push(st.sigma_eta[(0, 1)]);
            draws.push(st.sigma_eta[(1, 1)]);
            draws.extend(&st.sigma_y);
            for &t in free {
                draws.push(st.lambda[t]);
            }
        }
    }
    let post_iters = (mcmc.iterations - mcmc.burn_in) as f64;
    Ok(ChainOutput {
        draws,
        acceptance: kept_acc.iter().map(|&a| a as f64 / post_iters).collect(),
        jitter_repairs,
    })
}

fn invert_2x2(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    let det = a * d - b * c;
    let off = -0.5 * (b + c) / det;
    DMatrix::from_row_slice(2, 2, &[d / det, off, off, a / det])
}

/// Univariate slice sampler with stepping out and shrinkage.
fn slice_sample<R: Rng + ?Sized>(
    x0: f64,
    logf: impl Fn(f64) -> f64,
    width: f64,
    rng: &mut R,
) -> f64 {
    let f0 = logf(x0);
    let level = f0 + rng.random::<f64>().ln();
    let mut lo = x0 - width * rng.random::<f64>();
    let mut hi = lo + width;
    let mut steps = 0;
    while logf(lo) > level && steps < 200 {
        lo -= width;
        steps += 1;
    }
    steps = 0;
    while logf(hi) > level && steps < 200 {
        hi += width;
        steps += 1;
    }
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if logf(x) > level {
            return x;
        }
        if x < x0 {
            lo = x;
        } else {
            hi = x;
        }
        if hi - lo < 1e-14 {
            return x0;
        }
    }
}

impl GrowthPosterior {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn draws_per_chain(&self) -> usize {
        self.chains.first().map_or(0, |c| c.len() / self.layout.len())
    }

    pub fn n_draws(&self) -> usize {
        self.n_chains() * self.draws_per_chain()
    }

    /// Per-chain trace of parameter `p`.
    pub fn chain_traces(&self, p: usize) -> Vec<Vec<f64>> {
        let k = self.layout.len();
        self.chains
            .iter()
            .map(|c| c.iter().skip(p).step_by(k).copied().collect())
            .collect()
    }

    /// All retained draws of parameter `p`, chains concatenated.
    pub fn pooled(&self, p: usize) -> Vec<f64> {
        self.chain_traces(p).concat()
    }

    pub fn param(&self, name: &str) -> Option<Vec<f64>> {
        self.layout.index_of(name).map(|p| self.pooled(p))
    }

    /// Retained draw `s` (chains concatenated) as a parameter slice.
    pub fn draw(&self, s: usize) -> &[f64] {
        let k = self.layout.len();
        let per = self.draws_per_chain();
        let (c, r) = (s / per, s % per);
        &self.chains[c][r * k..(r + 1) * k]
    }

    /// Loadings of every cycle for draw `s`, free entries filled in.
    pub fn loadings(&self, s: usize) -> Vec<f64> {
        let d = self.draw(s);
        let mut l = self.spec.initial_values();
        for (j, &t) in self.layout.free.iter().enumerate() {
            l[t] = d[self.layout.lambda_free(j)];
        }
        l
    }

    pub fn beta00(&self) -> Vec<f64> {
        self.pooled(self.layout.gamma(0, 0))
    }

    pub fn beta10(&self) -> Vec<f64> {
        self.pooled(self.layout.gamma(1, 0))
    }

    /// Back-transformed starting percentage `100·inv_logit(β_00)`.
    pub fn start_pct(&self) -> Summary {
        let v: Vec<f64> = self.beta00().iter().map(|b| 100.0 * inv_logit(*b)).collect();
        Summary::from_draws(&v)
    }

    /// Back-transformed change over the first cycle, in percentage points.
    pub fn rate_pp(&self) -> Summary {
        let v: Vec<f64> = self
            .beta00()
            .iter()
            .zip(self.beta10())
            .map(|(b0, b1)| 100.0 * (inv_logit(b0 + b1) - inv_logit(*b0)))
            .collect();
        Summary::from_draws(&v)
    }

    pub fn summaries(&self) -> Vec<ParamSummary> {
        (0..self.layout.len())
            .into_par_iter()
            .map(|p| {
                let traces = self.chain_traces(p);
                let s = Summary::from_draws(&traces.concat());
                ParamSummary {
                    name: self.layout.names[p].clone(),
                    mean: s.mean,
                    sd: s.sd,
                    lower95: s.lower95,
                    upper95: s.upper95,
                    rhat: stats::split_rhat(&traces),
                    ess: stats::effective_sample_size(&traces),
                }
            })
            .collect()
    }

    /// Human-readable convergence warnings (R-hat above 1.1).
    pub fn convergence_warnings(summaries: &[ParamSummary]) -> Vec<String> {
        summaries
            .iter()
            .filter(|s| s.rhat > 1.1)
            .map(|s| format!("R-hat {:.3} > 1.1 for {}", s.rhat, s.name))
            .collect()
    }

    /// Pointwise log-likelihood `ln p(y_it | θ^(s))` for every retained draw,
    /// one entry per (country, cycle) cell in row-major order.
    pub fn pointwise_log_lik(&self) -> Vec<Vec<f64>> {
        let n = self.data.n_countries();
        let t_n = self.data.n_cycles();
        let ly = &self.layout;
        (0..self.n_draws())
            .into_par_iter()
            .map(|s| {
                let d = self.draw(s);
                let lam = self.loadings(s);
                let mut out = Vec::with_capacity(n * t_n);
                for i in 0..n {
                    for t in 0..t_n {
                        let mu = d[ly.pi0(i)] + lam[t] * d[ly.pi1(i)];
                        out.push(stats::normal_ln_pdf(self.data.y[i][t], mu, d[ly.sigma_y(t)]));
                    }
                }
                out
            })
            .collect()
    }

    /// Log-likelihood matrix for leave-one-out at the requested unit.
    pub fn log_lik(&self, unit: LooUnit) -> Vec<Vec<f64>> {
        match unit {
            LooUnit::Country => self.casewise_log_lik(),
            LooUnit::Cell => self.pointwise_log_lik(),
        }
    }

    /// Casewise log-likelihood with the growth factors integrated out:
    /// `ln N(y_i | Λ Γ x_i, Λ Σ_η Λ' + diag σ_t²)` for every retained draw,
    /// one entry per country.
    pub fn casewise_log_lik(&self) -> Vec<Vec<f64>> {
        let n = self.data.n_countries();
        let t_n = self.data.n_cycles();
        let ly = &self.layout;
        let rows: Vec<DVector<f64>> = (0..n).map(|i| self.data.design_row(i)).collect();
        let ln_2pi = (2.0 * std::f64::consts::PI).ln();
        (0..self.n_draws())
            .into_par_iter()
            .map(|s| {
                let d = self.draw(s);
                let lam = self.loadings(s);
                let e = ly.sigma_eta();
                let (s00, s01, s11) = (d[e], d[e + 1], d[e + 2]);
                let cov = DMatrix::from_fn(t_n, t_n, |t, u| {
                    let resid = if t == u { d[ly.sigma_y(t)].powi(2) } else { 0.0 };
                    s00 + (lam[t] + lam[u]) * s01 + lam[t] * lam[u] * s11 + resid
                });
                let chol = cholesky_with_jitter(&cov).expect("marginal covariance has a positive diagonal").0;
                let l = chol.l();
                let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let g0 = DVector::from_fn(ly.n_coef, |k, _| d[ly.gamma(0, k)]);
                let g1 = DVector::from_fn(ly.n_coef, |k, _| d[ly.gamma(1, k)]);
                rows.iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let (m0, m1) = (g0.dot(x), g1.dot(x));
                        let r = DVector::from_fn(t_n, |t, _| self.data.y[i][t] - m0 - lam[t] * m1);
                        let z = l.solve_lower_triangular(&r).expect("Cholesky factor is nonsingular");
                        -0.5 * (t_n as f64 * ln_2pi + log_det + z.norm_squared())
                    })
                    .collect()
            })
            .collect()
    }

    /// Flat CSV of every retained draw: `chain,iter,parameter,value`.
    pub fn write_draws_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["chain", "iter", "parameter", "value"])?;
        let k = self.layout.len();
        for (c, chain) in self.chains.iter().enumerate() {
            for (s, draw) in chain.chunks(k).enumerate() {
                let iter = self.mcmc.burn_in + s * self.mcmc.thin;
                for (name, v) in self.layout.names.iter().zip(draw) {
                    wr.write_record([
                        c.to_string(),
                        iter.to_string(),
                        name.clone(),
                        format!("{v:.10e}"),
                    ])?;
                }
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn summary_json(&self) -> GrowthSummaryJson {
        let summaries = self.summaries();
        GrowthSummaryJson {
            model: self.spec.label,
            loadings: self.spec.loadings.clone(),
            countries: self.data.n_countries(),
            cycles: self.data.cycle_years.clone(),
            predictors: self.data.predictor_names.clone(),
            chains: self.n_chains(),
            draws_per_chain: self.draws_per_chain(),
            seed: self.mcmc.seed,
            start_pct: self.start_pct(),
            rate_pp: self.rate_pp(),
            warnings: Self::convergence_warnings(&summaries),
            jitter_repairs: self.stats.jitter_repairs,
            parameters: summaries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrowthSummaryJson {
    pub model: SpecLabel,
    pub loadings: Vec<Loading>,
    pub countries: usize,
    pub cycles: Vec<i32>,
    pub predictors: Vec<String>,
    pub chains: usize,
    pub draws_per_chain: usize,
    pub seed: u64,
    pub start_pct: Summary,
    pub rate_pp: Summary,
    pub warnings: Vec<String>,
    pub jitter_repairs: usize,
    pub parameters: Vec<ParamSummary>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{simulate_growth, GrowthTruth};

    fn quick(seed: u64) -> McmcConfig {
        McmcConfig {
            chains: 2,
            iterations: 3000,
            burn_in: 1000,
            thin: 1,
            seed,
            ..McmcConfig::default()
        }
    }

    #[test]
    fn loading_specs() {
        let m0 = LoadingSpec::m0(5).unwrap();
        assert!(m0.free_indices().is_empty());
        assert_eq!(m0.initial_values(), vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(LoadingSpec::m1(5).unwrap().free_indices(), vec![4]);
        assert_eq!(LoadingSpec::m2(5).unwrap().free_indices(), vec![3, 4]);
        assert_eq!(LoadingSpec::m2(5).unwrap().linear_extrapolation(4), 4.0);
        assert!(LoadingSpec::with_free_mask(SpecLabel::Custom, &[true, false, true]).is_err());
        let bad = LoadingSpec {
            label: SpecLabel::Custom,
            loadings: vec![Loading::Fixed(1.0), Loading::Fixed(0.0), Loading::Free],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn priors_are_validated() {
        let spec = LoadingSpec::m0(5).unwrap();
        let p = GrowthPriors { resid_scale: 0.0, ..Default::default() };
        assert!(p.resolve(2, &spec).is_err());
        let p = GrowthPriors { eta_df: Some(1.0), ..Default::default() };
        assert!(p.resolve(2, &spec).is_err());
        let p = GrowthPriors { gamma_mean: Some(vec![0.0; 3]), ..Default::default() };
        assert!(p.resolve(2, &spec).is_err());
    }

    #[test]
    fn zero_noise_panel_concentrates_slopes() {
        let n = 20;
        let years = vec![2009, 2012, 2015, 2018, 2022];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let y: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..5)
                    .map(|t| {
                        0.5 + 0.02 * i as f64 - 0.07 * t as f64
                            + 1e-4 * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect()
            })
            .collect();
        let data = GrowthData::new((0..n).map(|i| format!("c{i}")).collect(), years, y).unwrap();
        let post = unconditional_growth(
            &data,
            &LoadingSpec::m0(5).unwrap(),
            &GrowthPriors::default(),
            &quick(1),
        )
        .unwrap();
        for s in posterior_slopes(&post) {
            assert!(s.sd < 1e-3, "{s:?}");
            assert!(s.upper95 - s.lower95 < 1e-2);
            assert!((s.mean + 0.07).abs() < 1e-3);
        }
    }

    #[test]
    fn constant_panel_has_flat_mean_slope() {
        let n = 30;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let y: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let level: f64 = rng.sample::<f64, _>(StandardNormal) * 0.5;
                (0..5).map(|_| level + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        let data = GrowthData::new(
            (0..n).map(|i| format!("c{i}")).collect(),
            vec![2009, 2012, 2015, 2018, 2022],
            y,
        )
        .unwrap();
        let post = unconditional_growth(&data, &LoadingSpec::m0(5).unwrap(), &GrowthPriors::default(), &quick(2)).unwrap();
        let b10 = Summary::from_draws(&post.beta10());
        assert!(b10.lower95 < 0.0 && b10.upper95 > 0.0, "{b10:?}");
        assert!(b10.mean.abs() < 0.02);
    }

    #[test]
    fn two_country_gls_oracle() {
        // Symmetric two-country panel with equal cycle variances: the GLS
        // estimate of the grand intercept is the mean of the per-country
        // least-squares intercepts.
        let base = [0.10, -0.05, 0.08, 0.01, -0.03];
        let y = vec![
            (0..5).map(|t| 1.0 + 0.1 * t as f64 + base[t]).collect::<Vec<_>>(),
            (0..5).map(|t| 0.4 - 0.1 * t as f64 - base[t]).collect::<Vec<_>>(),
        ];
        let ols_intercept = |ys: &[f64]| {
            let tm = 2.0;
            let ym = stats::mean(ys);
            let b: f64 = ys.iter().enumerate().map(|(t, y)| (t as f64 - tm) * (y - ym)).sum::<f64>() / 10.0;
            ym - b * tm
        };
        let gls = 0.5 * (ols_intercept(&y[0]) + ols_intercept(&y[1]));
        let data = GrowthData::new(vec!["a".into(), "b".into()], vec![0, 1, 2, 3, 4], y).unwrap();
        let priors = GrowthPriors { gamma_var: 1e8, ..Default::default() };
        let mcmc = McmcConfig { chains: 4, iterations: 30_000, burn_in: 5_000, ..quick(3) };
        let post = unconditional_growth(&data, &LoadingSpec::m0(5).unwrap(), &priors, &mcmc).unwrap();
        let m = stats::mean(&post.beta00());
        assert!((m - gls).abs() < 1e-2, "posterior {m} vs GLS {gls}");
    }

    #[test]
    fn fixed_loadings_never_move_and_sigma_eta_is_pd() {
        let truth = GrowthTruth::default();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let data = simulate_growth(30, &[0, 1, 2, 3, 4], &truth, -0.3, &mut rng);
        let spec = LoadingSpec::m2(5).unwrap();
        let post = fit_growth(&data, &spec, &GrowthPriors::default(), &quick(4)).unwrap();
        for s in 0..post.n_draws() {
            let l = post.loadings(s);
            assert_eq!(&l[..3], &[0.0, 1.0, 2.0]);
            let d = post.draw(s);
            let k = post.layout.sigma_eta();
            let m = DMatrix::from_row_slice(2, 2, &[d[k], d[k + 1], d[k + 1], d[k + 2]]);
            assert!(m.cholesky().is_some());
            for t in 0..5 {
                assert!(d[post.layout.sigma_y(t)] > 0.0);
            }
        }
        for acc in &post.stats.loading_acceptance {
            for a in acc {
                assert!(*a > 0.15 && *a < 0.8, "acceptance {a}");
            }
        }
    }

    #[test]
    fn shock_pushes_free_loading_above_linear() {
        let truth = GrowthTruth::default();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        // A last-wave drop with a negative mean slope stretches the loading.
        let data = simulate_growth(50, &[0, 1, 2, 3, 4], &truth, -0.3, &mut rng);
        let post = unconditional_growth(&data, &LoadingSpec::m1(5).unwrap(), &GrowthPriors::default(), &quick(6)).unwrap();
        let lam = stats::mean(&post.param("lambda[4]").unwrap());
        assert!(lam > 4.0, "free loading {lam}");
    }

    #[test]
    fn slopes_track_truth_and_summaries_are_complete() {
        let truth = GrowthTruth::default();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let (data, slopes) = crate::synthetic::simulate_growth_with_truth(50, &[0, 1, 2, 3, 4], &truth, 0.0, &mut rng);
        let post = unconditional_growth(&data, &LoadingSpec::m0(5).unwrap(), &GrowthPriors::default(), &quick(7)).unwrap();
        let est: Vec<f64> = posterior_slopes(&post).iter().map(|s| s.mean).collect();
        assert!(stats::pearson(&est, &slopes) > 0.9);
        let js = post.summary_json();
        assert_eq!(js.parameters.len(), post.layout.len());
        assert!(js.parameters.iter().all(|p| p.ess > 0.0));
        let ll = post.pointwise_log_lik();
        assert_eq!(ll.len(), post.n_draws());
        assert_eq!(ll[0].len(), 50 * 5);
        let mut buf = Vec::new();
        post.write_draws_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("chain,iter,parameter,value\n0,1000,pi0[c0],"));
    }

    #[test]
    fn independent_seeds_agree_within_mc_error() {
        let truth = GrowthTruth::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data = simulate_growth(50, &[0, 1, 2, 3, 4], &truth, 0.0, &mut rng);
        let priors = GrowthPriors { gamma_var: 1e6, ..Default::default() };
        let spec = LoadingSpec::m0(5).unwrap();
        let a = unconditional_growth(&data, &spec, &priors, &quick(100)).unwrap();
        let b = unconditional_growth(&data, &spec, &priors, &quick(200)).unwrap();
        for p in [a.layout.gamma(0, 0), a.layout.gamma(1, 0)] {
            let (ta, tb) = (a.chain_traces(p), b.chain_traces(p));
            let mcse = |t: &[Vec<f64>]| stats::sd(&t.concat()) / stats::effective_sample_size(t).sqrt();
            let diff = (stats::mean(&ta.concat()) - stats::mean(&tb.concat())).abs();
            let se = (mcse(&ta).powi(2) + mcse(&tb).powi(2)).sqrt();
            assert!(diff < 3.0 * se.max(1e-4), "diff {diff} se {se}");
        }
    }

    #[test]
    fn same_seed_is_reproducible() {
        let truth = GrowthTruth::default();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let data = simulate_growth(10, &[0, 1, 2, 3, 4], &truth, -0.3, &mut rng);
        let spec = LoadingSpec::m1(5).unwrap();
        let cfg = McmcConfig { iterations: 400, burn_in: 200, ..quick(8) };
        let a = fit_growth(&data, &spec, &GrowthPriors::default(), &cfg).unwrap();
        let b = fit_growth(&data, &spec, &GrowthPriors::default(), &cfg).unwrap();
        assert_eq!(a.chains, b.chains);
        assert_ne!(a.chains[0], a.chains[1]);
    }

    /// 2-D normal log density with covariance `s`.
    fn ln_mvn2(x: &DVector<f64>, m: &DVector<f64>, s: &DMatrix<f64>) -> f64 {
        let d = x - m;
        let q = (d.transpose() * s.clone().try_inverse().unwrap() * &d)[(0, 0)];
        -0.5 * (q + s.determinant().ln()) - (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn casewise_matches_candidate_identity() {
        // ln p(y_i) = ln p(y_i | η) + ln p(η) − ln p(η | y_i) at any η; the
        // conditional posterior of η is the conjugate normal update.
        let truth = GrowthTruth::default();
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let data = simulate_growth(8, &[0, 1, 2, 3, 4], &truth, -0.3, &mut rng);
        let cfg = McmcConfig { iterations: 300, burn_in: 100, ..quick(9) };
        let post = fit_growth(&data, &LoadingSpec::m1(5).unwrap(), &GrowthPriors::default(), &cfg).unwrap();
        let ll = post.casewise_log_lik();
        assert_eq!((ll.len(), ll[0].len()), (post.n_draws(), 8));
        let ly = &post.layout;
        for s in [0, 57, post.n_draws() - 1] {
            let d = post.draw(s);
            let lam = post.loadings(s);
            let e = ly.sigma_eta();
            let cov = DMatrix::from_row_slice(2, 2, &[d[e], d[e + 1], d[e + 1], d[e + 2]]);
            let mu = DVector::from_vec(vec![d[ly.gamma(0, 0)], d[ly.gamma(1, 0)]]);
            let z = DMatrix::from_fn(5, 2, |t, k| if k == 0 { 1.0 } else { lam[t] });
            let dinv = DMatrix::from_fn(5, 5, |t, u| if t == u { d[ly.sigma_y(t)].powi(-2) } else { 0.0 });
            for i in 0..8 {
                let y = DVector::from_vec(data.y[i].clone());
                let prec = cov.clone().try_inverse().unwrap() + z.transpose() * &dinv * &z;
                let v = prec.try_inverse().unwrap();
                let m = &v * (cov.clone().try_inverse().unwrap() * &mu + z.transpose() * &dinv * &y);
                let eta = DVector::from_vec(vec![0.3, -0.1]);
                let fitted = &z * &eta;
                let cond: f64 = (0..5).map(|t| stats::normal_ln_pdf(y[t], fitted[t], d[ly.sigma_y(t)])).sum();
                let expected = cond + ln_mvn2(&eta, &mu, &cov) - ln_mvn2(&eta, &m, &v);
                assert!((ll[s][i] - expected).abs() < 1e-8 * expected.abs().max(1.0), "{} vs {expected}", ll[s][i]);
            }
        }
        assert_eq!(post.log_lik(LooUnit::Cell)[0].len(), 40);
    }
}
