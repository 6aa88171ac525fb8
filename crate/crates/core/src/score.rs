//! Predictive evaluation: Kullback-Leibler divergences, log predictive
//! scores and Pareto-smoothed importance-sampling leave-one-out (PSIS-LOO).

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

/// Observations with `k̂` above this are flagged as unreliable.
pub const PARETO_K_BAD: f64 = 0.7;

/// Fraction of the importance ratios treated as the tail.
pub const TAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveSd(f64),
    #[error("need at least {needed} draws, got {got}")]
    TooFewDraws { needed: usize, got: usize },
    #[error("log-likelihood matrix is empty or ragged")]
    BadShape,
    #[error("non-finite log-likelihood at draw {draw}, observation {obs}")]
    NonFinite { draw: usize, obs: usize },
}

/// `KL(f ‖ g)` for `f = N(f_mean, f_sd²)` and `g = N(g_mean, g_sd²)`.
pub fn kld_gaussian(f_mean: f64, f_sd: f64, g_mean: f64, g_sd: f64) -> Result<f64, ScoreError> {
    for sd in [f_sd, g_sd] {
        if !(sd > 0.0) {
            return Err(ScoreError::NonPositiveSd(sd));
        }
    }
    let d = f_mean - g_mean;
    Ok((g_sd / f_sd).ln() + (f_sd * f_sd + d * d) / (2.0 * g_sd * g_sd) - 0.5)
}

pub const KLD_MIN_DRAWS: usize = 100;
const DENSITY_FLOOR: f64 = 1e-12;

/// Kernel-density estimate of `KL(f ‖ g)` from draws of each distribution.
/// Both Gaussian KDEs (Silverman bandwidth) are evaluated on a shared grid,
/// floored at 1e-12, normalized, and integrated by the trapezoid rule.
pub fn kld_samples(f_draws: &[f64], g_draws: &[f64], n_grid: usize) -> Result<f64, ScoreError> {
    for d in [f_draws, g_draws] {
        if d.len() < KLD_MIN_DRAWS {
            return Err(ScoreError::TooFewDraws { needed: KLD_MIN_DRAWS, got: d.len() });
        }
    }
    let n_grid = n_grid.max(16);
    let (hf, hg) = (silverman(f_draws), silverman(g_draws));
    let h = hf.max(hg);
    let lo = f_draws.iter().chain(g_draws).copied().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = f_draws.iter().chain(g_draws).copied().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
    let step = (hi - lo) / (n_grid - 1) as f64;
    let grid: Vec<f64> = (0..n_grid).map(|j| lo + step * j as f64).collect();
    let f = normalize(kde(f_draws, hf, &grid), step);
    let g = normalize(kde(g_draws, hg, &grid), step);
    let integrand: Vec<f64> = f.iter().zip(&g).map(|(a, b)| a * (a / b).ln()).collect();
    Ok(trapezoid(&integrand, step).max(0.0))
}

fn silverman(xs: &[f64]) -> f64 {
    let sd = stats::sd(xs);
    let iqr = stats::quantile(xs, 0.75) - stats::quantile(xs, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * (xs.len() as f64).powf(-0.2);
    if h > 0.0 {
        h
    } else {
        1e-6 * (1.0 + stats::mean(xs).abs())
    }
}

fn kde(xs: &[f64], h: f64, grid: &[f64]) -> Vec<f64> {
    // Sorted draws let each grid point visit only kernels within 8 bandwidths.
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let norm = 1.0 / (xs.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    grid.par_iter()
        .map(|&x| {
            let start = v.partition_point(|&d| d < x - 8.0 * h);
            let end = v.partition_point(|&d| d <= x + 8.0 * h);
            let s: f64 = v[start..end]
                .iter()
                .map(|&d| {
                    let z = (x - d) / h;
                    (-0.5 * z * z).exp()
                })
                .sum();
            (s * norm).max(DENSITY_FLOOR)
        })
        .collect()
}

fn normalize(mut d: Vec<f64>, step: f64) -> Vec<f64> {
    let total = trapezoid(&d, step);
    for v in &mut d {
        *v /= total;
    }
    d
}

fn trapezoid(v: &[f64], step: f64) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    step * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[v.len() - 1]))
}

/// Negative log density of `observed` under `N(pred_mean, pred_sd²)`.
pub fn log_predictive_score(pred_mean: f64, pred_sd: f64, observed: f64) -> Result<f64, ScoreError> {
    if !(pred_sd > 0.0) {
        return Err(ScoreError::NonPositiveSd(pred_sd));
    }
    Ok(-stats::normal_ln_pdf(observed, pred_mean, pred_sd))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpdMethod {
    /// Zhang & Stephens (2009) profile-posterior estimate with a weakly
    /// informative adjustment of `k̂` toward 0.5.
    #[default]
    ZhangStephens,
    /// Method of moments. Cannot produce `k̂ ≥ 0.5`.
    Moments,
}

/// Generalized Pareto fit `(k, σ)` to non-negative exceedances.
pub fn fit_gpd(x: &[f64], method: GpdMethod) -> (f64, f64) {
    let mut x: Vec<f64> = x.to_vec();
    x.sort_by(f64::total_cmp);
    match method {
        GpdMethod::ZhangStephens => gpd_zhang_stephens(&x),
        GpdMethod::Moments => {
            let m = stats::mean(&x);
            let v = stats::variance(&x);
            if !(v > 0.0) || !(m > 0.0) {
                return (f64::NAN, f64::NAN);
            }
            let r = m * m / v;
            (0.5 * (1.0 - r), 0.5 * m * (r + 1.0))
        }
    }
}

fn gpd_zhang_stephens(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let x_max = x[n - 1];
    if n < 2 || !(x_max > 0.0) {
        return (f64::NAN, f64::NAN);
    }
    let prior = 3.0;
    let m = 30 + (n as f64).sqrt() as usize;
    let quart = x[((n as f64 / 4.0 + 0.5).floor() as usize).saturating_sub(1).min(n - 1)];
    let quart = if quart > 0.0 { quart } else { x_max };
    let theta: Vec<f64> = (1..=m)
        .map(|j| 1.0 / x_max + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / (prior * quart))
        .collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let k = x.iter().map(|&xi| (-t * xi).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((-t / k).ln() - k - 1.0)
        })
        .collect();
    let weights: Vec<f64> = profile
        .iter()
        .map(|&l| {
            let s: f64 = profile.iter().map(|&o| (o - l).exp()).sum();
            if s.is_finite() { 1.0 / s } else { 0.0 }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let theta_hat: f64 = theta.iter().zip(&weights).map(|(t, w)| t * w).sum::<f64>() / total;
    let k = x.iter().map(|&xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let k = (n as f64 * k + 10.0 * 0.5) / (n as f64 + 10.0);
    (k, sigma)
}

/// GPD quantile function.
pub fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LooResult {
    pub elpd_loo: f64,
    pub se_elpd_loo: f64,
    pub p_loo: f64,
    pub loo_ic: f64,
    pub pointwise: Vec<f64>,
    /// `None` where the diagnostic is not applicable (constant draws).
    pub pareto_k: Vec<Option<f64>>,
    pub n_bad_k: usize,
    pub scale: String,
}

pub const LOO_MIN_DRAWS: usize = 1000;

/// PSIS-LOO from an `S × n` matrix of pointwise log-likelihoods.
pub fn psis_loo(log_lik: &[Vec<f64>]) -> Result<LooResult, ScoreError> {
    psis_loo_with(log_lik, GpdMethod::default(), LOO_MIN_DRAWS)
}

pub fn psis_loo_with(
    log_lik: &[Vec<f64>],
    method: GpdMethod,
    min_draws: usize,
) -> Result<LooResult, ScoreError> {
    let s = log_lik.len();
    if s < min_draws {
        return Err(ScoreError::TooFewDraws { needed: min_draws, got: s });
    }
    let n = log_lik[0].len();
    if n == 0 || log_lik.iter().any(|r| r.len() != n) {
        return Err(ScoreError::BadShape);
    }
    for (d, row) in log_lik.iter().enumerate() {
        if let Some(obs) = row.iter().position(|v| !v.is_finite()) {
            return Err(ScoreError::NonFinite { draw: d, obs });
        }
    }
    let per_obs: Vec<(f64, f64, Option<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let col: Vec<f64> = log_lik.iter().map(|r| r[i]).collect();
            let lppd_i = stats::log_sum_exp(&col) - (s as f64).ln();
            let (log_w, k) = psis_log_weights(&col, method);
            let num: Vec<f64> = log_w.iter().zip(&col).map(|(w, l)| w + l).collect();
            let elpd_i = stats::log_sum_exp(&num) - stats::log_sum_exp(&log_w);
            (elpd_i, lppd_i, k)
        })
        .collect();
    let pointwise: Vec<f64> = per_obs.iter().map(|p| p.0).collect();
    let elpd_loo: f64 = pointwise.iter().sum();
    let lppd: f64 = per_obs.iter().map(|p| p.1).sum();
    let pareto_k: Vec<Option<f64>> = per_obs.iter().map(|p| p.2).collect();
    let n_bad_k = pareto_k.iter().filter(|k| k.is_some_and(|k| k > PARETO_K_BAD)).count();
    Ok(LooResult {
        elpd_loo,
        se_elpd_loo: (n as f64 * stats::variance(&pointwise)).sqrt(),
        p_loo: lppd - elpd_loo,
        loo_ic: -2.0 * elpd_loo,
        pointwise,
        pareto_k,
        n_bad_k,
        scale: "logit".into(),
    })
}

/// Smoothed, truncated log importance weights for one observation.
fn psis_log_weights(log_lik: &[f64], method: GpdMethod) -> (Vec<f64>, Option<f64>) {
    let s = log_lik.len();
    let max = log_lik.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = log_lik.iter().copied().fold(f64::INFINITY, f64::min);
    if max - min == 0.0 {
        return (vec![0.0; s], None);
    }
    // log ratios = -log_lik, shifted so the largest is 0
    let mut lw: Vec<f64> = log_lik.iter().map(|l| -l + min).collect();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]).then(a.cmp(&b)));
    let m = ((TAIL_FRACTION * s as f64).ceil() as usize).min(s - 1);
    let cutoff = lw[order[s - m - 1]];
    let tail = &order[s - m..];
    let exceed: Vec<f64> = tail.iter().map(|&j| lw[j].exp() - cutoff.exp()).collect();
    let mut k_hat = None;
    if m >= 5 && exceed.iter().any(|&e| e > 0.0) {
        let (k, sigma) = fit_gpd(&exceed, method);
        if k.is_finite() && sigma.is_finite() && sigma > 0.0 {
            for (r, &j) in tail.iter().enumerate() {
                let p = (r as f64 + 0.5) / m as f64;
                let v = cutoff.exp() + gpd_quantile(p, k, sigma);
                lw[j] = v.ln().min(0.0);
            }
            k_hat = Some(k);
        }
    }
    // truncate at S^{3/4} times the mean weight
    let log_mean = stats::log_sum_exp(&lw) - (s as f64).ln();
    let cap = 0.75 * (s as f64).ln() + log_mean;
    for v in &mut lw {
        *v = v.min(cap);
    }
    (lw, k_hat)
}

/// One row of the model-comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub group: String,
    pub domain: String,
    pub model: String,
    pub start_pct: stats::Summary,
    pub rate_pp: stats::Summary,
    pub elpd_loo: f64,
    pub loo_ic: f64,
    pub n_bad_k: usize,
}

pub fn write_comparison_csv<W: Write>(rows: &[ComparisonRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "group", "domain", "model", "start_pct", "start_lo95", "start_hi95", "rate_pp",
        "rate_lo95", "rate_hi95", "elpd_loo", "loo_ic", "n_bad_k", "scale",
    ])?;
    for r in rows {
        wr.write_record([
            r.group.clone(),
            r.domain.clone(),
            r.model.clone(),
            format!("{:.4}", r.start_pct.mean),
            format!("{:.4}", r.start_pct.lower95),
            format!("{:.4}", r.start_pct.upper95),
            format!("{:.4}", r.rate_pp.mean),
            format!("{:.4}", r.rate_pp.lower95),
            format!("{:.4}", r.rate_pp.upper95),
            format!("{:.4}", r.elpd_loo),
            format!("{:.4}", r.loo_ic),
            r.n_bad_k.to_string(),
            "logit".into(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn gaussian_kld_closed_forms() {
        assert_eq!(kld_gaussian(0.0, 1.0, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(kld_gaussian(0.0, 1.0, 1.0, 1.0).unwrap(), 0.5);
        let v = kld_gaussian(0.0, 1.0, 0.0, 2.0).unwrap();
        assert!((v - 0.318_147_180_559_945_3).abs() < 1e-15);
        assert!(kld_gaussian(0.0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn sample_kld() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f: Vec<f64> = (0..100_000).map(|_| rng.sample(StandardNormal)).collect();
        let g: Vec<f64> = (0..100_000).map(|_| 1.0 + rng.sample::<f64, _>(StandardNormal)).collect();
        let v = kld_samples(&f, &g, 512).unwrap();
        assert!((v - 0.5).abs() < 0.05, "{v}");
        assert!(kld_samples(&f, &f, 512).unwrap() <= 1e-6);
        assert!(kld_samples(&f[..10], &g, 512).is_err());
    }

    #[test]
    fn lps_values() {
        let sd = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!(log_predictive_score(1.3, sd, 1.3).unwrap().abs() < 1e-15);
        let base = log_predictive_score(0.0, 2.0, 0.0).unwrap();
        assert!((log_predictive_score(0.0, 2.0, 2.0).unwrap() - base - 0.5).abs() < 1e-14);
        // independent pdf via statrs
        use statrs::distribution::{Continuous, Normal};
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (m, s, x): (f64, f64, f64) = (rng.random_range(-3.0..3.0), rng.random_range(0.1..3.0), rng.random_range(-5.0..5.0));
            let oracle = -Normal::new(m, s).unwrap().ln_pdf(x);
            assert!((log_predictive_score(m, s, x).unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn gpd_recovers_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..100_000).map(|_| gpd_quantile(rng.random::<f64>(), 0.3, 1.0)).collect();
        let (k, sigma) = fit_gpd(&x, GpdMethod::ZhangStephens);
        assert!((k - 0.3).abs() < 0.1, "k {k}");
        assert!((sigma - 1.0).abs() < 0.1, "sigma {sigma}");
        let (km, _) = fit_gpd(&x, GpdMethod::Moments);
        assert!((km - 0.3).abs() < 0.1, "moments k {km}");
    }

    #[test]
    fn gpd_flags_heavy_tails_only_with_profile_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..20_000).map(|_| gpd_quantile(rng.random::<f64>(), 0.9, 1.0)).collect();
        assert!(fit_gpd(&x, GpdMethod::ZhangStephens).0 > PARETO_K_BAD);
        assert!(fit_gpd(&x, GpdMethod::Moments).0 < 0.5);
    }

    fn regression_loglik(seed: u64, s: usize) -> (Vec<Vec<f64>>, f64) {
        // y = a + b x + e, known σ = 1, prior (a, b) ~ N(0, 10² I).
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 20;
        let x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|xi| 0.5 + 1.2 * xi + rng.sample::<f64, _>(StandardNormal)).collect();
        let post = |skip: Option<usize>| {
            let mut p = nalgebra::Matrix2::new(0.01, 0.0, 0.0, 0.01);
            let mut b = nalgebra::Vector2::zeros();
            for i in (0..n).filter(|&i| Some(i) != skip) {
                let z = nalgebra::Vector2::new(1.0, x[i]);
                p += z * z.transpose();
                b += z * y[i];
            }
            let v = p.try_inverse().unwrap();
            (v * b, v)
        };
        let exact: f64 = (0..n)
            .map(|i| {
                let (m, v) = post(Some(i));
                let z = nalgebra::Vector2::new(1.0, x[i]);
                let var = 1.0 + (z.transpose() * v * z)[(0, 0)];
                stats::normal_ln_pdf(y[i], z.dot(&m), var.sqrt())
            })
            .sum();
        let (m, v) = post(None);
        let l = v.cholesky().unwrap().l();
        let ll = (0..s)
            .map(|_| {
                let z = nalgebra::Vector2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                let beta = m + l * z;
                (0..n).map(|i| stats::normal_ln_pdf(y[i], beta[0] + beta[1] * x[i], 1.0)).collect()
            })
            .collect();
        (ll, exact)
    }

    #[test]
    fn psis_matches_exact_loo() {
        let (ll, exact) = regression_loglik(5, 4000);
        let r = psis_loo(&ll).unwrap();
        assert!((r.elpd_loo - exact).abs() <= 0.5, "{} vs {exact}", r.elpd_loo);
        assert_eq!(r.loo_ic, -2.0 * r.elpd_loo);
        assert!((r.pointwise.iter().sum::<f64>() - r.elpd_loo).abs() < 1e-10);
        assert!(r.pareto_k.iter().all(|k| k.is_some()));
    }

    #[test]
    fn psis_constant_draws() {
        let ll = vec![vec![-1.0, -2.0]; 1000];
        let r = psis_loo(&ll).unwrap();
        assert!((r.elpd_loo + 3.0).abs() < 1e-12);
        assert_eq!(r.pareto_k, vec![None, None]);
        assert!(psis_loo(&ll[..10]).is_err());
        let mut bad = ll.clone();
        bad[3][1] = f64::NAN;
        assert!(matches!(psis_loo(&bad), Err(ScoreError::NonFinite { draw: 3, obs: 1 })));
    }

    #[test]
    fn psis_shift_and_permutation() {
        let (ll, _) = regression_loglik(6, 1000);
        let base = psis_loo(&ll).unwrap();
        let shifted: Vec<Vec<f64>> = ll.iter().map(|r| r.iter().map(|v| v + 2.5).collect()).collect();
        let sh = psis_loo(&shifted).unwrap();
        for (a, b) in base.pointwise.iter().zip(&sh.pointwise) {
            assert!((b - a - 2.5).abs() < 1e-10);
        }
        let perm: Vec<Vec<f64>> = ll.iter().map(|r| r.iter().rev().copied().collect()).collect();
        assert!((psis_loo(&perm).unwrap().elpd_loo - base.elpd_loo).abs() < 1e-10);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn gaussian_kld_nonnegative(m1 in -5.0..5.0f64, s1 in 0.01..5.0f64, m2 in -5.0..5.0f64, s2 in 0.01..5.0f64) {
            let v = kld_gaussian(m1, s1, m2, s2).unwrap();
            prop_assert!(v >= -1e-15);
            prop_assert!(kld_gaussian(m1, s1, m1, s1).unwrap().abs() < 1e-15);
        }

        #[test]
        fn sample_kld_nonnegative(seed in 0u64..1000, shift in -2.0..2.0f64, scale in 0.3..3.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let f: Vec<f64> = (0..300).map(|_| rng.sample(StandardNormal)).collect();
            let g: Vec<f64> = (0..300).map(|_| shift + scale * rng.sample::<f64, _>(StandardNormal)).collect();
            prop_assert!(kld_samples(&f, &g, 256).unwrap() >= 0.0);
        }
    }
}
