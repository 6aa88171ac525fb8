//! Bayesian model averaging for a Gaussian linear regression under
//! Zellner's g-prior.
//!
//! The intercept carries a flat prior and the error variance the reference
//! prior `1/σ²`; both are integrated out by centering `y` and the columns of
//! `X`. With `β ~ N(0, gσ²(X'X)⁻¹)` the marginal likelihood of a model with
//! `q` predictors and centered coefficient of determination `R²` is
//!
//! ```text
//! p(y | M) = Γ((N-1)/2) π^{-(N-1)/2} N^{-1/2} ‖y - ȳ‖^{-(N-1)}
//!            (1+g)^{(N-1-q)/2} (1 + g(1-R²))^{-(N-1)/2}
//! ```
//!
//! The hyper-g prior puts a `Beta(1, α/2 - 1)` prior on the shrinkage factor
//! `s = g/(1+g)` and the marginal is integrated numerically.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::ContinuousCDF;
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::quadrature::GaussLegendre;
use crate::stats;

/// Default cap on the number of predictors for exact enumeration.
pub const DEFAULT_ENUMERATION_CAP: usize = 25;

/// Threshold below which the visited-mass diagnostic raises a warning.
pub const LOW_VISITED_MASS: f64 = 0.5;

#[derive(Debug, Error)]
pub enum BmaError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("{q} predictors exceed the enumeration cap of {cap}")]
    TooManyPredictors { q: usize, cap: usize },
    #[error("model {0:#x} has linearly dependent columns")]
    RankDeficient(u64),
    #[error("model {mask:#x} has {q} predictors but only {n} observations")]
    TooFewObservations { mask: u64, q: usize, n: usize },
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("outcome has zero variance")]
    ConstantOutcome,
}

/// A subset of predictors; bit `q` set means predictor `q` is included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelId {
    pub mask: u64,
}

impl ModelId {
    pub fn new(mask: u64) -> Self {
        ModelId { mask }
    }

    pub fn size(self) -> usize {
        self.mask.count_ones() as usize
    }

    pub fn contains(self, q: usize) -> bool {
        self.mask >> q & 1 == 1
    }

    pub fn columns(self) -> Vec<usize> {
        (0..64).filter(|&q| self.contains(q)).collect()
    }

    pub fn hex(self, n_predictors: usize) -> String {
        let width = n_predictors.div_ceil(4).max(1);
        format!("{:0width$x}", self.mask)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GPriorSpec {
    Uip,
    Ric,
    Bric,
    Hq,
    HyperG { alpha: f64 },
    Fixed { g: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResolvedG {
    Fixed(f64),
    HyperG(f64),
}

impl GPriorSpec {
    /// Resolve against `n` observations and `q_total` candidate predictors.
    pub fn resolve(&self, n: usize, q_total: usize) -> Result<ResolvedG, BmaError> {
        let (n, q) = (n as f64, q_total as f64);
        let g = match *self {
            GPriorSpec::Uip => n,
            GPriorSpec::Ric => q * q,
            GPriorSpec::Bric => n.max(q * q),
            GPriorSpec::Hq => n.ln().powi(3),
            GPriorSpec::Fixed { g } => g,
            GPriorSpec::HyperG { alpha } => {
                if !(alpha > 2.0) || !alpha.is_finite() {
                    return Err(BmaError::InvalidPrior(format!(
                        "hyper-g requires alpha > 2, got {alpha}"
                    )));
                }
                return Ok(ResolvedG::HyperG(alpha));
            }
        };
        if !(g > 0.0) || !g.is_finite() {
            return Err(BmaError::InvalidPrior(format!("g must be positive, got {g}")));
        }
        Ok(ResolvedG::Fixed(g))
    }
}

impl fmt::Display for GPriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GPriorSpec::Uip => f.write_str("UIP"),
            GPriorSpec::Ric => f.write_str("RIC"),
            GPriorSpec::Bric => f.write_str("BRIC"),
            GPriorSpec::Hq => f.write_str("HQ"),
            GPriorSpec::HyperG { alpha } => write!(f, "hyper-g(alpha={alpha})"),
            GPriorSpec::Fixed { g } => write!(f, "g={g}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelPriorSpec {
    Uniform,
    Binomial { theta: f64 },
    BetaBinomial { a: f64, b: f64 },
}

impl ModelPriorSpec {
    pub fn validate(&self) -> Result<(), BmaError> {
        match *self {
            ModelPriorSpec::Uniform => Ok(()),
            ModelPriorSpec::Binomial { theta } if theta > 0.0 && theta < 1.0 => Ok(()),
            ModelPriorSpec::BetaBinomial { a, b } if a > 0.0 && b > 0.0 => Ok(()),
            other => Err(BmaError::InvalidPrior(format!("{other:?}"))),
        }
    }
}

impl fmt::Display for ModelPriorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelPriorSpec::Uniform => f.write_str("uniform"),
            ModelPriorSpec::Binomial { theta } => write!(f, "binomial(theta={theta})"),
            ModelPriorSpec::BetaBinomial { a, b } => write!(f, "beta-binomial(a={a}, b={b})"),
        }
    }
}

/// Log prior probability of `model` among `q_total` candidate predictors.
pub fn model_prior_log(model: ModelId, spec: &ModelPriorSpec, q_total: usize) -> f64 {
    let q = model.size() as f64;
    let qt = q_total as f64;
    match *spec {
        ModelPriorSpec::Uniform => -qt * std::f64::consts::LN_2,
        ModelPriorSpec::Binomial { theta } => q * theta.ln() + (qt - q) * (1.0 - theta).ln(),
        ModelPriorSpec::BetaBinomial { a, b } => ln_beta(q + a, qt - q + b) - ln_beta(a, b),
    }
}

/// Centered regression data shared by every model evaluation.
#[derive(Debug, Clone)]
pub struct BmaProblem {
    pub names: Vec<String>,
    pub y: Vec<f64>,
    pub x: DMatrix<f64>,
    n: usize,
    y_mean: f64,
    x_mean: Vec<f64>,
    gram: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

/// Per-model quantities needed for posterior summaries.
#[derive(Debug, Clone)]
pub struct ModelFit {
    pub model: ModelId,
    pub r2: f64,
    pub columns: Vec<usize>,
    pub beta_hat: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub log_marginal: f64,
    /// Posterior mean of the shrinkage factor `g/(1+g)`.
    pub shrinkage: f64,
}

impl BmaProblem {
    pub fn new(y: &[f64], x: &DMatrix<f64>, names: Vec<String>) -> Result<Self, BmaError> {
        let n = y.len();
        if x.nrows() != n {
            return Err(BmaError::DimensionMismatch(format!(
                "y has {n} rows, X has {}",
                x.nrows()
            )));
        }
        if names.len() != x.ncols() {
            return Err(BmaError::DimensionMismatch(format!(
                "{} names for {} columns",
                names.len(),
                x.ncols()
            )));
        }
        if x.ncols() > 63 {
            return Err(BmaError::TooManyPredictors { q: x.ncols(), cap: 63 });
        }
        if n < 4 {
            return Err(BmaError::DimensionMismatch("need at least 4 observations".into()));
        }
        let y_mean = stats::mean(y);
        let x_mean: Vec<f64> = (0..x.ncols()).map(|j| x.column(j).mean()).collect();
        let xc = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - x_mean[j]);
        let yc = DVector::from_iterator(n, y.iter().map(|v| v - y_mean));
        let yty = yc.dot(&yc);
        if !(yty > 0.0) {
            return Err(BmaError::ConstantOutcome);
        }
        Ok(BmaProblem {
            names,
            y: y.to_vec(),
            x: x.clone(),
            n,
            y_mean,
            x_mean,
            gram: xc.transpose() * &xc,
            xty: xc.transpose() * yc,
            yty,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn n_predictors(&self) -> usize {
        self.names.len()
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    fn log_const(&self) -> f64 {
        let m = (self.n - 1) as f64 / 2.0;
        ln_gamma(m) - m * std::f64::consts::PI.ln() - 0.5 * (self.n as f64).ln() - m * self.yty.ln()
    }

    /// Least-squares pieces for one model.
    fn least_squares(
        &self,
        model: ModelId,
    ) -> Result<(Vec<usize>, DVector<f64>, DMatrix<f64>, f64), BmaError> {
        let cols = model.columns();
        let q = cols.len();
        if cols.iter().any(|&c| c >= self.n_predictors()) {
            return Err(BmaError::DimensionMismatch(format!(
                "model {:#x} refers to predictors beyond {}",
                model.mask,
                self.n_predictors()
            )));
        }
        if q + 1 >= self.n {
            return Err(BmaError::TooFewObservations { mask: model.mask, q, n: self.n });
        }
        if q == 0 {
            return Ok((cols, DVector::zeros(0), DMatrix::zeros(0, 0), 0.0));
        }
        let g = DMatrix::from_fn(q, q, |a, b| self.gram[(cols[a], cols[b])]);
        let xty = DVector::from_fn(q, |a, _| self.xty[cols[a]]);
        let chol = g.clone().cholesky().ok_or(BmaError::RankDeficient(model.mask))?;
        let l = chol.l();
        for a in 0..q {
            if l[(a, a)] * l[(a, a)] < 1e-10 * g[(a, a)] {
                return Err(BmaError::RankDeficient(model.mask));
            }
        }
        let beta = chol.solve(&xty);
        let r2 = (xty.dot(&beta) / self.yty).clamp(0.0, 1.0);
        if r2 >= 1.0 - 1e-14 {
            return Err(BmaError::RankDeficient(model.mask));
        }
        Ok((cols, beta, chol.inverse(), r2))
    }

    /// Centered R² of `y` on the model's columns.
    pub fn r_squared(&self, model: ModelId) -> Result<f64, BmaError> {
        Ok(self.least_squares(model)?.3)
    }

    pub fn log_marginal(&self, model: ModelId, g: ResolvedG) -> Result<f64, BmaError> {
        let r2 = self.r_squared(model)?;
        Ok(self.log_marginal_from_r2(r2, model.size(), g).0)
    }

    /// `(log marginal, posterior mean shrinkage)` for a model with the given
    /// fit statistics.
    fn log_marginal_from_r2(&self, r2: f64, q: usize, g: ResolvedG) -> (f64, f64) {
        let m = (self.n - 1) as f64 / 2.0;
        match g {
            ResolvedG::Fixed(g) => {
                let lm = self.log_const() + ((self.n - 1 - q) as f64 / 2.0) * g.ln_1p()
                    - m * (g * (1.0 - r2)).ln_1p();
                (lm, g / (1.0 + g))
            }
            ResolvedG::HyperG(alpha) => {
                let i0 = hyper_g_log_integral(r2, q, self.n, alpha, 0.0);
                let i1 = hyper_g_log_integral(r2, q, self.n, alpha, 1.0);
                (self.log_const() + i0, 1.0 - (i1 - i0).exp())
            }
        }
    }

    pub fn fit(&self, model: ModelId, g: ResolvedG) -> Result<ModelFit, BmaError> {
        let (columns, beta_hat, xtx_inv, r2) = self.least_squares(model)?;
        let (log_marginal, shrinkage) = self.log_marginal_from_r2(r2, columns.len(), g);
        Ok(ModelFit { model, r2, columns, beta_hat, xtx_inv, log_marginal, shrinkage })
    }

    /// Residual scale term `S = ‖y_c‖²(1 - s R²)`.
    fn s_term(&self, fit: &ModelFit) -> f64 {
        self.yty * (1.0 - fit.shrinkage * fit.r2)
    }

    /// Posterior mean and variance of each included coefficient.
    fn coef_moments(&self, fit: &ModelFit) -> Vec<(usize, f64, f64)> {
        let s = fit.shrinkage;
        let scale = s * self.s_term(fit) / (self.n as f64 - 3.0);
        fit.columns
            .iter()
            .enumerate()
            .map(|(a, &c)| (c, s * fit.beta_hat[a], scale * fit.xtx_inv[(a, a)]))
            .collect()
    }

    /// Student-t predictive `(location, scale, df)` for a raw predictor row.
    pub fn predictive(&self, fit: &ModelFit, x_new: &[f64]) -> (f64, f64, f64) {
        let xt = DVector::from_fn(fit.columns.len(), |a, _| {
            x_new[fit.columns[a]] - self.x_mean[fit.columns[a]]
        });
        let s = fit.shrinkage;
        let loc = self.y_mean + s * xt.dot(&fit.beta_hat);
        let quad = if xt.is_empty() { 0.0 } else { (xt.transpose() * &fit.xtx_inv * &xt)[(0, 0)] };
        let df = (self.n - 1) as f64;
        let scale2 = self.s_term(fit) / df * (1.0 + 1.0 / self.n as f64 + s * quad);
        (loc, scale2.sqrt(), df)
    }
}

/// `ln ∫₀¹ (α/2-1) u^{e+k} (1-R²+uR²)^{-(N-1)/2} du` with
/// `e = q/2 + α/2 - 2` and `u = 1 - s`. After `t = ln u` the integrand is
/// log-concave; it is integrated by composite 61-point Gauss-Legendre
/// panels scaled to the width of its peak.
fn hyper_g_log_integral(r2: f64, q: usize, n: usize, alpha: f64, k: f64) -> f64 {
    let m = (n - 1) as f64 / 2.0;
    let c = q as f64 / 2.0 + alpha / 2.0 - 1.0 + k;
    let lead = (alpha / 2.0 - 1.0).ln();
    let a = 1.0 - r2;
    let b = r2;
    if b <= 0.0 {
        return lead - c.ln();
    }
    let logf = |t: f64| c * t - m * (a + b * t.exp()).ln();
    let mode = if m > c { (c * a / (b * (m - c))).ln().min(0.0) } else { 0.0 };
    let e = mode.exp();
    let curv = m * a * b * e / ((a + b * e) * (a + b * e));
    let sd = if curv > 0.0 { (1.0 / curv).sqrt() } else { 1.0 };
    let lo = mode - 12.0 * sd - 50.0 / c;
    let width = (2.0 * sd).clamp(0.05, 4.0);
    let panels = ((0.0 - lo) / width).ceil().clamp(1.0, 2000.0) as usize;
    let h = -lo / panels as f64;
    let gl = gl61();
    let mut terms = Vec::with_capacity(panels * 61);
    for p in 0..panels {
        let a0 = lo + p as f64 * h;
        for (t, w) in gl.points(a0, a0 + h) {
            terms.push(logf(t) + w.ln());
        }
    }
    lead + stats::log_sum_exp(&terms)
}

fn gl61() -> &'static GaussLegendre {
    static RULE: std::sync::OnceLock<GaussLegendre> = std::sync::OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(61))
}

/// Log marginal likelihood of `model` for outcome `y` and predictors `x`.
pub fn log_marginal_likelihood(
    y: &[f64],
    x: &DMatrix<f64>,
    model: ModelId,
    gspec: &GPriorSpec,
) -> Result<f64, BmaError> {
    let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
    let p = BmaProblem::new(y, x, names)?;
    let g = gspec.resolve(p.n(), p.n_predictors())?;
    p.log_marginal(model, g)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmaMethod {
    Enumeration,
    BdMcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecord {
    pub model: ModelId,
    pub log_posterior: f64,
    pub pmp: f64,
    /// Post-burn-in visit frequency (sampling only).
    pub frequency: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefSummary {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone)]
pub struct BmaResult {
    pub method: BmaMethod,
    pub g_spec: GPriorSpec,
    pub model_prior: ModelPriorSpec,
    /// Reported models in rank order (descending PMP, then ascending mask).
    pub models: Vec<ModelRecord>,
    pub pips: Vec<f64>,
    pub coef: Vec<CoefSummary>,
    pub intercept_mean: f64,
    pub total_visited_mass: f64,
    pub warnings: Vec<String>,
    pub problem: Arc<BmaProblem>,
    g: ResolvedG,
    /// `(pmp, fit)` for every model with positive mass, in rank order.
    fits: Arc<Vec<(f64, ModelFit)>>,
}

/// Enumeration keeps every model when the space has at most this many
/// members; larger spaces only keep models with non-negligible mass.
const ENUM_KEEP_ALL: u64 = 1 << 20;
const ENUM_MIN_PMP: f64 = 1e-15;

pub fn enumerate_bma(
    problem: &BmaProblem,
    gspec: &GPriorSpec,
    mspec: &ModelPriorSpec,
) -> Result<BmaResult, BmaError> {
    enumerate_bma_capped(problem, gspec, mspec, DEFAULT_ENUMERATION_CAP)
}

pub fn enumerate_bma_capped(
    problem: &BmaProblem,
    gspec: &GPriorSpec,
    mspec: &ModelPriorSpec,
    cap: usize,
) -> Result<BmaResult, BmaError> {
    let q_total = problem.n_predictors();
    if q_total > cap {
        return Err(BmaError::TooManyPredictors { q: q_total, cap });
    }
    mspec.validate()?;
    let g = gspec.resolve(problem.n(), q_total)?;
    let n_models = 1u64 << q_total;
    let log_post: Vec<f64> = (0..n_models)
        .into_par_iter()
        .map(|mask| {
            let m = ModelId::new(mask);
            match problem.log_marginal(m, g) {
                Ok(lm) => lm + model_prior_log(m, mspec, q_total),
                Err(_) => f64::NEG_INFINITY,
            }
        })
        .collect();
    let skipped = log_post.iter().filter(|v| v.is_infinite()).count();
    let lse = stats::log_sum_exp(&log_post);
    let keep_all = n_models <= ENUM_KEEP_ALL;
    let records: Vec<(ModelId, f64, f64)> = log_post
        .iter()
        .enumerate()
        .filter_map(|(mask, &lp)| {
            let pmp = (lp - lse).exp();
            (lp.is_finite() && (keep_all || pmp >= ENUM_MIN_PMP))
                .then(|| (ModelId::new(mask as u64), lp, pmp))
        })
        .collect();
    // Inclusion probabilities use every model, not only the kept ones.
    let mut pips = vec![0.0; q_total];
    for (mask, &lp) in log_post.iter().enumerate() {
        if lp.is_finite() {
            let w = (lp - lse).exp();
            for (q, pip) in pips.iter_mut().enumerate() {
                if mask >> q & 1 == 1 {
                    *pip += w;
                }
            }
        }
    }
    let mut warnings = Vec::new();
    if skipped > 0 {
        warnings.push(format!("{skipped} models skipped (rank deficient or too large)"));
    }
    let models = records
        .into_iter()
        .map(|(model, log_posterior, pmp)| ModelRecord { model, log_posterior, pmp, frequency: None })
        .collect();
    finish(problem, BmaMethod::Enumeration, *gspec, *mspec, g, models, Some(pips), 1.0, warnings)
}

/// Settings for the birth-death sampler over model space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BdConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub seed: u64,
    /// Number of top models used to estimate the visited mass.
    pub mass_top_models: usize,
}

impl Default for BdConfig {
    fn default() -> Self {
        BdConfig {
            iterations: 200_000,
            burn_in: 20_000,
            chains: 2,
            seed: 20_240_601,
            mass_top_models: 100,
        }
    }
}

struct ChainVisits {
    log_post: HashMap<u64, f64>,
    counts: HashMap<u64, u64>,
}

/// Birth-death Metropolis-Hastings over model space: each step toggles one
/// uniformly chosen predictor. PMPs are the exact posteriors renormalized
/// over the visited set; visit frequencies are kept as a diagnostic.
pub fn bd_mcmc_bma(
    problem: &BmaProblem,
    gspec: &GPriorSpec,
    mspec: &ModelPriorSpec,
    cfg: &BdConfig,
) -> Result<BmaResult, BmaError> {
    if cfg.iterations <= cfg.burn_in {
        return Err(BmaError::InvalidConfig("iterations must exceed burn_in".into()));
    }
    if cfg.chains == 0 {
        return Err(BmaError::InvalidConfig("chains must be >= 1".into()));
    }
    mspec.validate()?;
    let q_total = problem.n_predictors();
    let g = gspec.resolve(problem.n(), q_total)?;
    let eval = |mask: u64| -> f64 {
        let m = ModelId::new(mask);
        match problem.log_marginal(m, g) {
            Ok(lm) => lm + model_prior_log(m, mspec, q_total),
            Err(_) => f64::NEG_INFINITY,
        }
    };
    let visits: Vec<ChainVisits> = (0..cfg.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let mut log_post = HashMap::new();
            let mut counts = HashMap::new();
            let mut cur = 0u64;
            let mut cur_lp = eval(cur);
            log_post.insert(cur, cur_lp);
            for it in 0..cfg.iterations {
                if q_total > 0 {
                    let j = rng.random_range(0..q_total);
                    let prop = cur ^ (1u64 << j);
                    let prop_lp = *log_post.entry(prop).or_insert_with(|| eval(prop));
                    let u: f64 = rng.random();
                    if prop_lp.is_finite() && u.ln() < prop_lp - cur_lp {
                        cur = prop;
                        cur_lp = prop_lp;
                    }
                }
                if it >= cfg.burn_in {
                    *counts.entry(cur).or_insert(0u64) += 1;
                }
            }
            ChainVisits { log_post, counts }
        })
        .collect();

    let mut visited: BTreeMap<u64, f64> = BTreeMap::new();
    let mut counts: BTreeMap<u64, u64> = BTreeMap::new();
    for v in &visits {
        for (&m, &lp) in &v.log_post {
            if lp.is_finite() {
                visited.insert(m, lp);
            }
        }
        for (&m, &c) in &v.counts {
            *counts.entry(m).or_insert(0) += c;
        }
    }
    let total: u64 = counts.values().sum();
    let lps: Vec<f64> = visited.values().copied().collect();
    let lse = stats::log_sum_exp(&lps);
    let models: Vec<ModelRecord> = visited
        .iter()
        .map(|(&mask, &lp)| ModelRecord {
            model: ModelId::new(mask),
            log_posterior: lp,
            pmp: (lp - lse).exp(),
            frequency: Some(counts.get(&mask).copied().unwrap_or(0) as f64 / total as f64),
        })
        .collect();
    let mass = visited_mass(&models, lse, cfg.mass_top_models);
    let mut warnings = Vec::new();
    if mass < LOW_VISITED_MASS {
        warnings.push(format!(
            "estimated posterior mass of visited models is {mass:.3} (< {LOW_VISITED_MASS})"
        ));
    }
    finish(problem, BmaMethod::BdMcmc, *gspec, *mspec, g, models, None, mass, warnings)
}

/// Estimate of the share of total posterior mass covered by the visited
/// models. The unknown normalizing constant is estimated from the top models
/// as (sum of their unnormalized posteriors) / (sum of their visit
/// frequencies).
fn visited_mass(models: &[ModelRecord], lse: f64, top: usize) -> f64 {
    let mut ranked: Vec<&ModelRecord> = models.iter().collect();
    ranked.sort_by(|a, b| b.pmp.total_cmp(&a.pmp).then(a.model.cmp(&b.model)));
    let top = &ranked[..top.min(ranked.len())];
    let freq: f64 = top.iter().filter_map(|m| m.frequency).sum();
    if freq <= 0.0 {
        return f64::NAN;
    }
    let lp: Vec<f64> = top.iter().map(|m| m.log_posterior).collect();
    let log_z = stats::log_sum_exp(&lp) - freq.ln();
    (lse - log_z).exp().min(1.0)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    problem: &BmaProblem,
    method: BmaMethod,
    g_spec: GPriorSpec,
    model_prior: ModelPriorSpec,
    g: ResolvedG,
    mut models: Vec<ModelRecord>,
    pips: Option<Vec<f64>>,
    total_visited_mass: f64,
    warnings: Vec<String>,
) -> Result<BmaResult, BmaError> {
    models.sort_by(|a, b| b.pmp.total_cmp(&a.pmp).then(a.model.cmp(&b.model)));
    let q_total = problem.n_predictors();
    let pips = pips.unwrap_or_else(|| {
        let mut p = vec![0.0; q_total];
        for m in &models {
            for c in m.model.columns() {
                p[c] += m.pmp;
            }
        }
        p
    });
    // Fits are computed in parallel but accumulated in rank order so the
    // sums do not depend on thread scheduling.
    let fits: Vec<(f64, ModelFit)> = models
        .par_iter()
        .filter(|m| m.pmp > 0.0)
        .map(|m| Ok((m.pmp, problem.fit(m.model, g)?)))
        .collect::<Result<_, BmaError>>()?;
    let mut first = vec![0.0; q_total];
    let mut second = vec![0.0; q_total];
    for (w, fit) in &fits {
        for (c, mean, var) in problem.coef_moments(fit) {
            first[c] += w * mean;
            second[c] += w * (var + mean * mean);
        }
    }
    let mass: f64 = models.iter().map(|m| m.pmp).sum();
    let coef: Vec<CoefSummary> = first
        .iter()
        .zip(&second)
        .map(|(m1, m2)| {
            let mean = m1 / mass;
            CoefSummary { mean, sd: (m2 / mass - mean * mean).max(0.0).sqrt() }
        })
        .collect();
    let intercept_mean = problem.y_mean
        - problem.x_mean.iter().zip(&coef).map(|(xm, c)| xm * c.mean).sum::<f64>();
    Ok(BmaResult {
        method,
        g_spec,
        model_prior,
        models,
        pips,
        coef,
        intercept_mean,
        total_visited_mass,
        warnings,
        problem: Arc::new(problem.clone()),
        g,
        fits: Arc::new(fits),
    })
}

/// A finite mixture of Student-t predictive distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMixture {
    /// `(weight, location, scale, df)`.
    pub components: Vec<(f64, f64, f64, f64)>,
}

impl PredictiveMixture {
    pub fn mean(&self) -> f64 {
        self.components.iter().map(|c| c.0 * c.1).sum()
    }

    /// Law of total variance across components.
    pub fn sd(&self) -> f64 {
        let m = self.mean();
        let second: f64 = self
            .components
            .iter()
            .map(|&(w, loc, scale, df)| w * (scale * scale * df / (df - 2.0) + loc * loc))
            .sum();
        (second - m * m).max(0.0).sqrt()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.pdf_many(&[x])[0]
    }

    /// Densities at many points, sharing the per-component constants.
    pub fn pdf_many(&self, xs: &[f64]) -> Vec<f64> {
        let mut last_df = f64::NAN;
        let mut norm = 0.0;
        let consts: Vec<(f64, f64, f64, f64)> = self
            .components
            .iter()
            .map(|&(w, loc, scale, df)| {
                if df != last_df {
                    norm = ln_gamma(0.5 * (df + 1.0)) - ln_gamma(0.5 * df)
                        - 0.5 * (df * std::f64::consts::PI).ln();
                    last_df = df;
                }
                (w.ln() + norm - scale.ln(), loc, scale, df)
            })
            .collect();
        xs.iter()
            .map(|&x| {
                consts
                    .iter()
                    .map(|&(k, loc, scale, df)| {
                        let z = (x - loc) / scale;
                        (k - 0.5 * (df + 1.0) * (z * z / df).ln_1p()).exp()
                    })
                    .sum()
            })
            .collect()
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components
            .iter()
            .map(|&(w, loc, scale, df)| w * t_cdf((x - loc) / scale, df))
            .sum()
    }

    /// Quantile by safeguarded Newton iteration on the mixture CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let (m, s) = (self.mean(), self.sd().max(1e-300));
        let (mut lo, mut hi) = (m - 10.0 * s, m + 10.0 * s);
        while self.cdf(lo) > p {
            lo -= 10.0 * s;
        }
        while self.cdf(hi) < p {
            hi += 10.0 * s;
        }
        let z = statrs::distribution::Normal::standard().inverse_cdf(p);
        let mut x = (m + z * s).clamp(lo, hi);
        for _ in 0..200 {
            let f = self.cdf(x) - p;
            if f < 0.0 {
                lo = x;
            } else {
                hi = x;
            }
            let d = self.pdf(x);
            let mut next = if d > 0.0 { x - f / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - x).abs() <= 1e-13 * (1.0 + x.abs()) || hi - lo <= 1e-14 * (1.0 + x.abs()) {
                return next;
            }
            x = next;
        }
        x
    }

    /// The `n` heaviest components, renormalized.
    pub fn top_components(&self, n: usize) -> PredictiveMixture {
        let mut idx: Vec<usize> = (0..self.components.len()).collect();
        idx.sort_by(|&a, &b| self.components[b].0.total_cmp(&self.components[a].0).then(a.cmp(&b)));
        idx.truncate(n.max(1));
        let total: f64 = idx.iter().map(|&i| self.components[i].0).sum();
        PredictiveMixture {
            components: idx
                .iter()
                .map(|&i| {
                    let c = self.components[i];
                    (c.0 / total, c.1, c.2, c.3)
                })
                .collect(),
        }
    }

    /// Sampler with precomputed cumulative weights.
    pub fn sampler(&self) -> MixtureSampler<'_> {
        let mut acc = 0.0;
        let cum = self
            .components
            .iter()
            .map(|c| {
                acc += c.0;
                acc
            })
            .collect();
        MixtureSampler { mix: self, cum }
    }
}

pub struct MixtureSampler<'a> {
    mix: &'a PredictiveMixture,
    cum: Vec<f64>,
}

impl MixtureSampler<'_> {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let total = *self.cum.last().expect("non-empty mixture");
        let u: f64 = rng.random::<f64>() * total;
        let j = self.cum.partition_point(|&c| c <= u).min(self.cum.len() - 1);
        let (_, loc, scale, df) = self.mix.components[j];
        let t: f64 = rng.sample(rand_distr::StudentT::new(df).expect("df > 0"));
        loc + scale * t
    }
}

/// Student-t CDF with `df` degrees of freedom at standardized `z`.
fn t_cdf(z: f64, df: f64) -> f64 {
    let tail = 0.5 * beta_reg(0.5 * df, 0.5, df / (df + z * z));
    if z > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

impl BmaResult {
    pub fn n_predictors(&self) -> usize {
        self.problem.n_predictors()
    }

    pub fn names(&self) -> &[String] {
        &self.problem.names
    }

    pub fn resolved_g(&self) -> Option<f64> {
        match self.g {
            ResolvedG::Fixed(g) => Some(g),
            ResolvedG::HyperG(_) => None,
        }
    }

    /// Model-averaged predictive for a raw predictor row.
    pub fn predictive_mixture(&self, x_new: &[f64]) -> Result<PredictiveMixture, BmaError> {
        if x_new.len() != self.n_predictors() {
            return Err(BmaError::DimensionMismatch(format!(
                "predictor row has {} entries, expected {}",
                x_new.len(),
                self.n_predictors()
            )));
        }
        let mass: f64 = self.fits.iter().map(|f| f.0).sum();
        let components = self
            .fits
            .iter()
            .map(|(w, fit)| {
                let (loc, scale, df) = self.problem.predictive(fit, x_new);
                (w / mass, loc, scale, df)
            })
            .collect();
        Ok(PredictiveMixture { components })
    }

    pub fn to_json(&self, top: usize) -> BmaJson {
        let q = self.n_predictors();
        BmaJson {
            method: self.method,
            g_spec: self.g_spec,
            g: self.resolved_g(),
            model_prior: self.model_prior,
            n_observations: self.problem.n(),
            pips: self.names().iter().cloned().zip(self.pips.iter().copied()).collect(),
            top_models: self
                .models
                .iter()
                .take(top)
                .map(|m| TopModel {
                    mask_hex: m.model.hex(q),
                    size: m.model.size(),
                    pmp: m.pmp,
                    frequency: m.frequency,
                })
                .collect(),
            coef: self.names().iter().cloned().zip(self.coef.iter().copied()).collect(),
            intercept_mean: self.intercept_mean,
            total_visited_mass: self.total_visited_mass,
            n_models: self.models.len(),
            warnings: self.warnings.clone(),
        }
    }

    /// PIP table: `predictor,pip,post_mean,post_sd`, sorted by descending PIP.
    pub fn write_pip_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut order: Vec<usize> = (0..self.n_predictors()).collect();
        order.sort_by(|&a, &b| self.pips[b].total_cmp(&self.pips[a]).then(a.cmp(&b)));
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["predictor", "pip", "post_mean", "post_sd"])?;
        for q in order {
            wr.write_record([
                self.names()[q].clone(),
                format!("{:.6}", self.pips[q]),
                format!("{:.6e}", self.coef[q].mean),
                format!("{:.6e}", self.coef[q].sd),
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopModel {
    pub mask_hex: String,
    pub size: usize,
    pub pmp: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frequency: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BmaJson {
    pub method: BmaMethod,
    pub g_spec: GPriorSpec,
    pub g: Option<f64>,
    pub model_prior: ModelPriorSpec,
    pub n_observations: usize,
    pub pips: BTreeMap<String, f64>,
    pub top_models: Vec<TopModel>,
    pub coef: BTreeMap<String, CoefSummary>,
    pub intercept_mean: f64,
    pub total_visited_mass: f64,
    pub n_models: usize,
    pub warnings: Vec<String>,
}

/// Model-averaged predictive mean and sd for a raw predictor row.
pub fn averaged_prediction(result: &BmaResult, x_new: &[f64]) -> Result<(f64, f64), BmaError> {
    let mix = result.predictive_mixture(x_new)?;
    Ok((mix.mean(), mix.sd()))
}

/// Mean and sd of a mixture given `(weight, mean, sd)` components.
pub fn mix_moments(components: &[(f64, f64, f64)]) -> (f64, f64) {
    let w: f64 = components.iter().map(|c| c.0).sum();
    let m = components.iter().map(|c| c.0 * c.1).sum::<f64>() / w;
    let second = components.iter().map(|c| c.0 * (c.2 * c.2 + c.1 * c.1)).sum::<f64>() / w;
    (m, (second - m * m).max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityCurve {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub lower95: f64,
    pub upper95: f64,
    pub expected: f64,
    pub observed: f64,
}

pub const DENSITY_GRID_POINTS: usize = 512;

/// Models retained for plotted predictive densities.
pub const DENSITY_TOP_MODELS: usize = 500;

/// Predictive density of country `i`'s outcome given its predictor row,
/// using every row for estimation.
pub fn predictive_density(result: &BmaResult, i: usize) -> Result<DensityCurve, BmaError> {
    let p = &result.problem;
    if i >= p.n() {
        return Err(BmaError::DimensionMismatch(format!("row {i} out of range")));
    }
    let row: Vec<f64> = p.x.row(i).iter().copied().collect();
    let full = result.predictive_mixture(&row)?;
    let (m, s) = (full.mean(), full.sd());
    // Curve and quantiles use the best-ranked models only; the expected
    // value uses every model.
    let mix = full.top_components(DENSITY_TOP_MODELS);
    let k = DENSITY_GRID_POINTS;
    let grid: Vec<f64> = (0..k)
        .map(|j| m - 5.0 * s + 10.0 * s * j as f64 / (k - 1) as f64)
        .collect();
    let density = mix.pdf_many(&grid);
    Ok(DensityCurve {
        grid,
        density,
        lower95: mix.quantile(0.025),
        upper95: mix.quantile(0.975),
        expected: m,
        observed: p.y[i],
    })
}
