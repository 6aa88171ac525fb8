//! Small numerical and summary-statistics helpers shared by the samplers
//! and the report writers.

use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample variance with the `n - 1` denominator.
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64
}

pub fn sd(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Linear-interpolation quantile (R type 7) of an unsorted sample.
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn normal_ln_pdf(x: f64, mean: f64, sd: f64) -> f64 {
    let z = (x - mean) / sd;
    -0.5 * z * z - sd.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

/// Posterior summary of a scalar quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub lower95: f64,
    pub upper95: f64,
}

impl Summary {
    pub fn from_draws(xs: &[f64]) -> Self {
        let mut v = xs.to_vec();
        v.sort_by(f64::total_cmp);
        Summary {
            mean: mean(xs),
            sd: sd(xs),
            lower95: quantile_sorted(&v, 0.025),
            upper95: quantile_sorted(&v, 0.975),
        }
    }

    pub fn width(&self) -> f64 {
        self.upper95 - self.lower95
    }
}

/// Split-chain potential scale reduction factor. Chains are trimmed to the
/// shortest length and each is halved before computing between/within
/// variances.
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    if half < 2 {
        return f64::NAN;
    }
    let mut splits: Vec<&[f64]> = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        splits.push(&c[..half]);
        splits.push(&c[n - half..n]);
    }
    let means: Vec<f64> = splits.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = splits.iter().map(|c| variance(c)).collect();
    let w = mean(&vars);
    let b = half as f64 * variance(&means);
    if w <= 0.0 {
        // Constant chains: agree exactly if the means agree.
        return if b <= 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (half as f64 - 1.0) / half as f64 * w + b / half as f64;
    (var_plus / w).sqrt()
}

/// Effective sample size across chains using Geyer's initial monotone
/// positive sequence on the combined autocorrelation estimate.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let vars: Vec<f64> = chains.iter().map(|c| variance(c)).collect();
    let w = mean(&vars);
    let b_over_n = if m > 1 { variance(&means) } else { 0.0 };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b_over_n;
    if var_plus <= 0.0 {
        return (m * n) as f64;
    }
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .zip(&means)
        .map(|(c, &mu)| c.iter().map(|x| x - mu).collect())
        .collect();
    // Autocovariances are computed lazily: the Geyer sequence usually
    // terminates after a handful of lags.
    let rho = |lag: usize| -> f64 {
        let mean_acov = centered
            .iter()
            .map(|c| autocovariance_at(c, lag))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut pair_sums: Vec<f64> = Vec::new();
    let mut t = 0;
    while t + 1 < n {
        let p = if t == 0 { 1.0 + rho(1) } else { rho(t) + rho(t + 1) };
        if p <= 0.0 {
            break;
        }
        let p = match pair_sums.last() {
            Some(&prev) if p > prev => prev,
            _ => p,
        };
        pair_sums.push(p);
        t += 2;
    }
    let tau = -1.0 + 2.0 * pair_sums.iter().sum::<f64>();
    let tau = tau.max(1.0 / ((m * n) as f64).log10().max(1.0));
    (m * n) as f64 / tau
}

fn autocovariance_at(centered: &[f64], lag: usize) -> f64 {
    let n = centered.len();
    centered[..n - lag]
        .iter()
        .zip(&centered[lag..])
        .map(|(a, b)| a * b)
        .sum::<f64>()
        / n as f64
}
