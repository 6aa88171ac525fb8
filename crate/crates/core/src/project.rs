//! Forward projection of minimum-proficiency percentages.
//!
//! For every retained growth draw the country intercept `π0_i` is paired with
//! a slope drawn from the model-averaged predictive distribution; the logit
//! trajectory `π0 + slope · λ(year)` is then back-transformed. Means are
//! averages of back-transformed draws; band limits are back-transformed logit
//! quantiles.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bma::{BmaResult, DensityCurve, PredictiveMixture};
use crate::lgcm::GrowthPosterior;
use crate::panel::{inv_logit, Domain, Group};

/// Label used for the cross-country trajectory.
pub const OVERALL: &str = "ALL";

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("future year {year} is not after the last observed cycle {last}")]
    NotInFuture { year: i32, last: i32 },
    #[error("no loading configured for year {0}")]
    NoLoading(i32),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("year {0} not present in the projection")]
    MissingYear(i32),
    #[error("projections do not share cycles")]
    MismatchedCycles,
    #[error("no projections to combine")]
    Empty,
    #[error(transparent)]
    Bma(#[from] crate::bma::BmaError),
}

/// Year → slope loading for future cycles. The default continues the
/// equally spaced ladder of the five observed cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FutureLoadings(pub BTreeMap<i32, f64>);

impl Default for FutureLoadings {
    fn default() -> Self {
        FutureLoadings(BTreeMap::from([(2029, 5.0), (2033, 6.0)]))
    }
}

impl FutureLoadings {
    pub fn years(&self) -> Vec<i32> {
        self.0.keys().copied().collect()
    }
}

/// Distribution of the forecast slope on the logit scale.
#[derive(Debug, Clone, PartialEq)]
pub enum SlopeDistribution {
    Fixed(f64),
    Normal { mean: f64, sd: f64 },
    Mixture(PredictiveMixture),
}

impl SlopeDistribution {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SlopeDistribution::Fixed(v) => *v,
            SlopeDistribution::Normal { mean, sd } => mean + sd * rng.sample::<f64, _>(StandardNormal),
            SlopeDistribution::Mixture(m) => m.sampler().sample(rng),
        }
    }

    /// `n` draws; mixture sampling reuses one set of cumulative weights.
    pub fn sample_n<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<f64> {
        match self {
            SlopeDistribution::Mixture(m) => {
                let s = m.sampler();
                (0..n).map(|_| s.sample(rng)).collect()
            }
            _ => (0..n).map(|_| self.sample(rng)).collect(),
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            SlopeDistribution::Fixed(v) => *v,
            SlopeDistribution::Normal { mean, .. } => *mean,
            SlopeDistribution::Mixture(m) => m.mean(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub year: i32,
    pub mean: f64,
    pub lower95: f64,
    pub upper95: f64,
}

impl Band {
    pub fn width(&self) -> f64 {
        self.upper95 - self.lower95
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub country: String,
    pub group: Group,
    pub domain: Domain,
    /// Observed percentages per cycle.
    pub history: Vec<(i32, f64)>,
    pub fitted: Vec<Band>,
    pub forecast: Vec<Band>,
    /// Forecast summaries on the logit scale.
    pub forecast_logit: Vec<Band>,
    pub change_first_last: Option<f64>,
    /// Logit-scale draws for every fitted then forecast year.
    #[serde(skip)]
    pub draws: Vec<Vec<f64>>,
}

/// Everything needed to project one country, in plain arrays.
#[derive(Debug, Clone)]
pub struct ProjectionInput<'a> {
    pub country: &'a str,
    pub group: Group,
    pub domain: Domain,
    pub cycle_years: &'a [i32],
    /// Observed percentages, one per cycle.
    pub history_pct: &'a [f64],
    /// Logit-scale fitted draws per cycle: `fitted[t][s]`.
    pub fitted: Vec<Vec<f64>>,
    /// Intercept draws `π0_i`.
    pub intercepts: &'a [f64],
    pub slope: SlopeDistribution,
}

pub fn project_from_draws(
    input: &ProjectionInput<'_>,
    future: &FutureLoadings,
    rng: &mut ChaCha8Rng,
) -> Result<ProjectionResult, ProjectError> {
    let last = *input.cycle_years.last().ok_or(ProjectError::MismatchedCycles)?;
    if input.history_pct.len() != input.cycle_years.len() || input.fitted.len() != input.cycle_years.len() {
        return Err(ProjectError::DimensionMismatch(
            "history/fitted do not match the cycle list".into(),
        ));
    }
    for &y in future.0.keys() {
        if y <= last {
            return Err(ProjectError::NotInFuture { year: y, last });
        }
    }
    let slopes = input.slope.sample_n(input.intercepts.len(), rng);
    let mut draws = input.fitted.clone();
    let mut forecast = Vec::new();
    let mut forecast_logit = Vec::new();
    for (&year, &load) in &future.0 {
        let d: Vec<f64> = input.intercepts.iter().zip(&slopes).map(|(a, b)| a + b * load).collect();
        forecast.push(summarize_pct(year, &d));
        forecast_logit.push(summarize_logit(year, &d));
        draws.push(d);
    }
    let fitted: Vec<Band> = input
        .cycle_years
        .iter()
        .zip(&input.fitted)
        .map(|(&y, d)| summarize_pct(y, d))
        .collect();
    let history: Vec<(i32, f64)> = input.cycle_years.iter().copied().zip(input.history_pct.iter().copied()).collect();
    let change = match (history.first(), forecast.last()) {
        (Some(h), Some(f)) => Some(f.mean - h.1),
        _ => None,
    };
    Ok(ProjectionResult {
        country: input.country.to_string(),
        group: input.group,
        domain: input.domain,
        history,
        fitted,
        forecast,
        forecast_logit,
        change_first_last: change,
        draws,
    })
}

/// Project country `i` of a growth fit using the model-averaged predictive
/// distribution of its slope given its predictor row.
#[allow(clippy::too_many_arguments)]
pub fn project_country(
    growth: &GrowthPosterior,
    i: usize,
    group: Group,
    domain: Domain,
    history_pct: &[f64],
    bma: &BmaResult,
    x_country: &[f64],
    future: &FutureLoadings,
    seed: u64,
) -> Result<ProjectionResult, ProjectError> {
    if i >= growth.data.n_countries() {
        return Err(ProjectError::DimensionMismatch(format!("country index {i}")));
    }
    let mix = bma.predictive_mixture(x_country)?;
    let slope = SlopeDistribution::Mixture(mix);
    project_country_with_slope(growth, i, group, domain, history_pct, slope, future, seed)
}

#[allow(clippy::too_many_arguments)]
pub fn project_country_with_slope(
    growth: &GrowthPosterior,
    i: usize,
    group: Group,
    domain: Domain,
    history_pct: &[f64],
    slope: SlopeDistribution,
    future: &FutureLoadings,
    seed: u64,
) -> Result<ProjectionResult, ProjectError> {
    let ly = &growth.layout;
    let s_n = growth.n_draws();
    let t_n = growth.data.n_cycles();
    let mut fitted = vec![Vec::with_capacity(s_n); t_n];
    let mut intercepts = Vec::with_capacity(s_n);
    for s in 0..s_n {
        let d = growth.draw(s);
        let lam = growth.loadings(s);
        let (p0, p1) = (d[ly.pi0(i)], d[ly.pi1(i)]);
        intercepts.push(p0);
        for t in 0..t_n {
            fitted[t].push(p0 + lam[t] * p1);
        }
    }
    let input = ProjectionInput {
        country: &growth.data.countries[i],
        group,
        domain,
        cycle_years: &growth.data.cycle_years,
        history_pct,
        fitted,
        intercepts: &intercepts,
        slope,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64);
    project_from_draws(&input, future, &mut rng)
}

/// Cross-country trajectory: unweighted mean of the country means, with
/// bands from quantiles of the pooled draws.
pub fn project_overall(per_country: &[ProjectionResult]) -> Result<ProjectionResult, ProjectError> {
    let first = per_country.first().ok_or(ProjectError::Empty)?;
    let years = |r: &ProjectionResult| -> Vec<i32> {
        r.fitted.iter().chain(&r.forecast).map(|b| b.year).collect()
    };
    let ref_years = years(first);
    if per_country.iter().any(|r| years(r) != ref_years || r.draws.len() != ref_years.len()) {
        return Err(ProjectError::MismatchedCycles);
    }
    let n_fit = first.fitted.len();
    let pooled: Vec<Vec<f64>> = (0..ref_years.len())
        .map(|k| per_country.iter().flat_map(|r| r.draws[k].iter().copied()).collect())
        .collect();
    let mut fitted = Vec::new();
    let mut forecast = Vec::new();
    let mut forecast_logit = Vec::new();
    for (k, &year) in ref_years.iter().enumerate() {
        let mut band = summarize_pct(year, &pooled[k]);
        let src = if k < n_fit { &per_country.iter().map(|r| r.fitted[k].mean).collect::<Vec<_>>() } else { &per_country.iter().map(|r| r.forecast[k - n_fit].mean).collect::<Vec<_>>() };
        band.mean = src.iter().sum::<f64>() / src.len() as f64;
        if k < n_fit {
            fitted.push(band);
        } else {
            forecast.push(band);
            forecast_logit.push(summarize_logit(year, &pooled[k]));
        }
    }
    let history: Vec<(i32, f64)> = first
        .history
        .iter()
        .enumerate()
        .map(|(t, &(y, _))| {
            let v = per_country.iter().map(|r| r.history[t].1).sum::<f64>() / per_country.len() as f64;
            (y, v)
        })
        .collect();
    let change = match (history.first(), forecast.last()) {
        (Some(h), Some(f)) => Some(f.mean - h.1),
        _ => None,
    };
    Ok(ProjectionResult {
        country: OVERALL.into(),
        group: first.group,
        domain: first.domain,
        history,
        fitted,
        forecast,
        forecast_logit,
        change_first_last: change,
        draws: pooled,
    })
}

/// Inverse-ECDF quantile: invariant to duplicating the sample, so pooling
/// identical inputs reproduces them.
fn ecdf_quantile(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let idx = ((p * n as f64).ceil() as usize).clamp(1, n) - 1;
    sorted[idx]
}

/// Band from quantile limits, widened to contain the mean. A mean can fall
/// outside the 95% quantiles for extremely skewed draws, or by a rounding
/// step when all draws are equal.
fn band(year: i32, mean: f64, lower: f64, upper: f64) -> Band {
    Band { year, mean, lower95: lower.min(mean), upper95: upper.max(mean) }
}

fn logit_quantiles(draws: &[f64]) -> (f64, f64) {
    let mut v = draws.to_vec();
    v.sort_by(f64::total_cmp);
    (ecdf_quantile(&v, 0.025), ecdf_quantile(&v, 0.975))
}

fn summarize_logit(year: i32, draws: &[f64]) -> Band {
    let (lo, hi) = logit_quantiles(draws);
    band(year, crate::stats::mean(draws), lo, hi)
}

fn summarize_pct(year: i32, draws: &[f64]) -> Band {
    let (lo, hi) = logit_quantiles(draws);
    let mean = draws.iter().map(|&d| 100.0 * inv_logit(d)).sum::<f64>() / draws.len() as f64;
    band(year, mean, 100.0 * inv_logit(lo), 100.0 * inv_logit(hi))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChangeRow {
    pub country: String,
    pub group: Group,
    pub domain: Domain,
    pub base_year: i32,
    pub target_year: i32,
    pub base: f64,
    pub target: f64,
    pub change: f64,
}

impl ChangeRow {
    /// Whole-percent presentation values `(base, target, change)`.
    pub fn rounded(&self) -> (i64, i64, i64) {
        let (b, t) = (self.base.round() as i64, self.target.round() as i64);
        (b, t, t - b)
    }
}

fn value_at(r: &ProjectionResult, year: i32) -> Option<f64> {
    r.history
        .iter()
        .find(|h| h.0 == year)
        .map(|h| h.1)
        .or_else(|| r.forecast.iter().find(|b| b.year == year).map(|b| b.mean))
}

pub fn change_table(
    results: &[ProjectionResult],
    base_year: i32,
    target_year: i32,
) -> Result<Vec<ChangeRow>, ProjectError> {
    results
        .iter()
        .map(|r| {
            let base = value_at(r, base_year).ok_or(ProjectError::MissingYear(base_year))?;
            let target = value_at(r, target_year).ok_or(ProjectError::MissingYear(target_year))?;
            Ok(ChangeRow {
                country: r.country.clone(),
                group: r.group,
                domain: r.domain,
                base_year,
                target_year,
                base,
                target,
                change: target - base,
            })
        })
        .collect()
}

pub fn write_change_csv<W: Write>(rows: &[ChangeRow], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record([
        "country", "group", "domain", "base_year", "target_year", "base", "target", "change",
        "base_rounded", "target_rounded", "change_rounded",
    ])?;
    for r in rows {
        let (b, t, c) = r.rounded();
        wr.write_record([
            r.country.clone(),
            r.group.to_string(),
            r.domain.to_string(),
            r.base_year.to_string(),
            r.target_year.to_string(),
            format!("{:.4}", r.base),
            format!("{:.4}", r.target),
            format!("{:.4}", r.change),
            b.to_string(),
            t.to_string(),
            format!("{c:+}"),
        ])?;
    }
    wr.flush()?;
    Ok(())
}

/// `country,group,domain,year,kind,mean,lo95,hi95`.
pub fn write_projection_csv<W: Write>(results: &[ProjectionResult], w: W) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["country", "group", "domain", "year", "kind", "mean", "lo95", "hi95"])?;
    for r in results {
        let (g, d) = (r.group.to_string(), r.domain.to_string());
        for &(y, v) in &r.history {
            let v = format!("{v:.4}");
            wr.write_record([&r.country, &g, &d, &y.to_string(), "observed", &v, &v, &v])?;
        }
        for (kind, bands) in [("fitted", &r.fitted), ("forecast", &r.forecast)] {
            for b in bands {
                wr.write_record([
                    &r.country,
                    &g,
                    &d,
                    &b.year.to_string(),
                    kind,
                    &format!("{:.4}", b.mean),
                    &format!("{:.4}", b.lower95),
                    &format!("{:.4}", b.upper95),
                ])?;
            }
        }
    }
    wr.flush()?;
    Ok(())
}

/// Project every country in parallel; the result order follows the input.
pub fn project_all<F>(n: usize, f: F) -> Result<Vec<ProjectionResult>, ProjectError>
where
    F: Fn(usize) -> Result<ProjectionResult, ProjectError> + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 50.0;

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(out, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, xml_escape(title));
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn axes(out: &mut String, x0: f64, x1: f64, y0: f64, y1: f64, xticks: &[f64], yticks: &[f64], xlab: &str, ylab: &str) {
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let _ = writeln!(out, r#"<line x1="{PAD}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - PAD, W - PAD, H - PAD);
    let _ = writeln!(out, r#"<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{}" stroke="black"/>"#, H - PAD);
    for &t in xticks {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, sx(t), H - PAD + 16.0, fmt_tick(t));
    }
    for &t in yticks {
        let _ = writeln!(out, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, PAD - 6.0, sy(t) + 4.0, fmt_tick(t));
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 10.0, xml_escape(xlab));
    let _ = writeln!(out, r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#, H / 2.0, H / 2.0, xml_escape(ylab));
}

fn fmt_tick(t: f64) -> String {
    if t.fract() == 0.0 { format!("{t:.0}") } else { format!("{t:.3}") }
}

fn polyline(out: &mut String, pts: &[(f64, f64)], style: &str) {
    let p: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(out, r#"<polyline points="{}" fill="none" {style}/>"#, p.join(" "));
}

/// Trajectory plot: observed history (solid grey), fitted and forecast means
/// (forecast dashed) and a shaded 95% band.
pub fn trajectory_svg(r: &ProjectionResult) -> String {
    let mut out = String::new();
    let bands: Vec<&Band> = r.fitted.iter().chain(&r.forecast).collect();
    let (x0, x1) = (bands.first().map_or(0.0, |b| b.year as f64), bands.last().map_or(1.0, |b| b.year as f64));
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0).max(1.0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / 100.0 * (H - 2.0 * PAD);
    svg_open(&mut out, &format!("{} — {} {} (band: pooled 95% quantiles)", r.country, r.group, r.domain));
    let ticks: Vec<f64> = bands.iter().map(|b| b.year as f64).collect();
    axes(&mut out, x0, x1.max(x0 + 1.0), 0.0, 100.0, &ticks, &[0.0, 25.0, 50.0, 75.0, 100.0], "year", "% at or above minimum proficiency");
    let mut poly: Vec<String> = bands.iter().map(|b| format!("{:.2},{:.2}", sx(b.year as f64), sy(b.upper95))).collect();
    poly.extend(bands.iter().rev().map(|b| format!("{:.2},{:.2}", sx(b.year as f64), sy(b.lower95))));
    let _ = writeln!(out, r#"<polygon points="{}" fill="steelblue" fill-opacity="0.2" stroke="none"/>"#, poly.join(" "));
    polyline(&mut out, &r.history.iter().map(|&(y, v)| (sx(y as f64), sy(v))).collect::<Vec<_>>(), r#"stroke="grey" stroke-width="2""#);
    polyline(&mut out, &r.fitted.iter().map(|b| (sx(b.year as f64), sy(b.mean))).collect::<Vec<_>>(), r#"stroke="seagreen" stroke-width="2""#);
    if let Some(last) = r.fitted.last() {
        let mut pts = vec![(sx(last.year as f64), sy(last.mean))];
        pts.extend(r.forecast.iter().map(|b| (sx(b.year as f64), sy(b.mean))));
        polyline(&mut out, &pts, r#"stroke="seagreen" stroke-width="2" stroke-dasharray="6,4""#);
    }
    out.push_str("</svg>\n");
    out
}

/// Predictive density of a country's slope with the expected value (solid),
/// the unconditional estimate (dashed) and 95% quantiles (dotted).
pub fn density_svg(title: &str, d: &DensityCurve, unconditional: f64) -> String {
    let mut out = String::new();
    let x0 = d.grid.first().copied().unwrap_or(0.0).min(unconditional);
    let x1 = d.grid.last().copied().unwrap_or(1.0).max(unconditional);
    let ymax = d.density.iter().copied().fold(0.0, f64::max) * 1.1;
    let ymax = if ymax > 0.0 { ymax } else { 1.0 };
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y / ymax * (H - 2.0 * PAD);
    svg_open(&mut out, title);
    let xt: Vec<f64> = (0..5).map(|k| x0 + (x1 - x0) * k as f64 / 4.0).collect();
    let yt: Vec<f64> = (0..5).map(|k| ymax * k as f64 / 4.0).collect();
    axes(&mut out, x0, x1, 0.0, ymax, &xt, &yt, "growth rate (logit per cycle)", "density");
    polyline(&mut out, &d.grid.iter().zip(&d.density).map(|(&x, &y)| (sx(x), sy(y))).collect::<Vec<_>>(), r#"stroke="black" stroke-width="1.5""#);
    let vline = |out: &mut String, x: f64, style: &str| {
        let _ = writeln!(out, r#"<line x1="{:.2}" y1="{PAD}" x2="{:.2}" y2="{}" {style}/>"#, sx(x), sx(x), H - PAD);
    };
    vline(&mut out, d.expected, r#"stroke="black" stroke-width="1.5""#);
    vline(&mut out, unconditional, r#"stroke="firebrick" stroke-dasharray="6,4""#);
    vline(&mut out, d.lower95, r#"stroke="grey" stroke-dasharray="2,3""#);
    vline(&mut out, d.upper95, r#"stroke="grey" stroke-dasharray="2,3""#);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::panel::logit;

    fn degenerate(intercept: f64, slope: SlopeDistribution, s: usize) -> ProjectionResult {
        let years = [2009, 2012, 2015, 2018, 2022];
        let intercepts = vec![intercept; s];
        let b = slope.mean();
        let fitted: Vec<Vec<f64>> = (0..5).map(|t| vec![intercept + b * t as f64; s]).collect();
        let hist: Vec<f64> = (0..5).map(|t| 100.0 * inv_logit(intercept + b * t as f64)).collect();
        let input = ProjectionInput {
            country: "X",
            group: Group::Boys,
            domain: Domain::Reading,
            cycle_years: &years,
            history_pct: &hist,
            fitted,
            intercepts: &intercepts,
            slope,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        project_from_draws(&input, &FutureLoadings::default(), &mut rng).unwrap()
    }

    #[test]
    fn degenerate_projection_arithmetic() {
        let a = logit(0.68).unwrap();
        let r = degenerate(a, SlopeDistribution::Fixed(-0.1), 100);
        let f2033 = r.forecast.iter().find(|b| b.year == 2033).unwrap();
        let expect = 100.0 * inv_logit(a - 0.6);
        assert!((f2033.mean - expect).abs() < 1e-10);
        assert!((f2033.lower95 - expect).abs() < 1e-10 && (f2033.upper95 - expect).abs() < 1e-10);
        let map = FutureLoadings(BTreeMap::from([(2040, 8.0)]));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let years = [2009, 2012];
        let input = ProjectionInput {
            country: "X",
            group: Group::Girls,
            domain: Domain::Mathematics,
            cycle_years: &years,
            history_pct: &[68.0, 67.0],
            fitted: vec![vec![a; 3], vec![a - 0.1; 3]],
            intercepts: &[a, a, a],
            slope: SlopeDistribution::Fixed(-0.1),
        };
        let r = project_from_draws(&input, &map, &mut rng).unwrap();
        assert!((r.forecast[0].mean - 100.0 * inv_logit(a - 0.8)).abs() < 1e-10);
    }

    #[test]
    fn zero_slope_is_flat() {
        let a = logit(0.6).unwrap();
        let r = degenerate(a, SlopeDistribution::Fixed(0.0), 50);
        for b in &r.forecast {
            assert!((b.mean - r.fitted[0].mean).abs() < 1e-12);
        }
    }

    #[test]
    fn bands_stay_in_range_and_widen_on_logit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let years = [2009, 2012, 2015, 2018, 2022];
        let intercepts: Vec<f64> = (0..4000).map(|_| 4.0 + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        let fitted: Vec<Vec<f64>> = (0..5).map(|_| intercepts.clone()).collect();
        let input = ProjectionInput {
            country: "Y",
            group: Group::Boys,
            domain: Domain::Mathematics,
            cycle_years: &years,
            history_pct: &[98.0; 5],
            fitted,
            intercepts: &intercepts,
            slope: SlopeDistribution::Normal { mean: 0.5, sd: 1.0 },
        };
        let r = project_from_draws(&input, &FutureLoadings::default(), &mut rng).unwrap();
        for b in r.fitted.iter().chain(&r.forecast) {
            assert!(b.lower95 >= 0.0 && b.upper95 <= 100.0);
            assert!(b.lower95 <= b.mean && b.mean <= b.upper95);
        }
        assert!(r.forecast_logit[1].width() >= r.forecast_logit[0].width());
        assert!(matches!(
            project_from_draws(&input, &FutureLoadings(BTreeMap::from([(2022, 4.0)])), &mut rng),
            Err(ProjectError::NotInFuture { .. })
        ));
    }

    proptest::proptest! {
        #[test]
        fn band_invariants(
            centre in -30.0f64..30.0,
            spread in 0.0f64..10.0,
            slope_mean in -3.0f64..3.0,
            slope_sd in 0.0f64..3.0,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let years = [2009, 2012, 2015, 2018, 2022];
            let ints: Vec<f64> = (0..300).map(|_| centre + spread * rng.sample::<f64, _>(StandardNormal)).collect();
            let input = ProjectionInput {
                country: "P",
                group: Group::Girls,
                domain: Domain::Reading,
                cycle_years: &years,
                history_pct: &[50.0; 5],
                fitted: vec![ints.clone(); 5],
                intercepts: &ints,
                slope: SlopeDistribution::Normal { mean: slope_mean, sd: slope_sd },
            };
            let r = project_from_draws(&input, &FutureLoadings::default(), &mut rng).unwrap();
            for b in r.fitted.iter().chain(&r.forecast) {
                proptest::prop_assert!(0.0 <= b.lower95 && b.lower95 <= b.mean);
                proptest::prop_assert!(b.mean <= b.upper95 && b.upper95 <= 100.0);
            }
            // Quantiles commute with the monotone back-transform.
            let last = r.draws.last().unwrap();
            let mut pct: Vec<f64> = last.iter().map(|d| 100.0 * inv_logit(*d)).collect();
            pct.sort_by(f64::total_cmp);
            let f = r.forecast.last().unwrap();
            if f.lower95 < f.mean && f.mean < f.upper95 {
                proptest::prop_assert_eq!(f.lower95, ecdf_quantile(&pct, 0.025));
                proptest::prop_assert_eq!(f.upper95, ecdf_quantile(&pct, 0.975));
            }
        }
    }

    #[test]
    fn overall_projection_identities() {
        let r60 = degenerate(logit(0.6).unwrap(), SlopeDistribution::Fixed(0.0), 20);
        let r70 = degenerate(logit(0.7).unwrap(), SlopeDistribution::Fixed(0.0), 20);
        let all = project_overall(&[r60.clone(), r70]).unwrap();
        for b in all.fitted.iter().chain(&all.forecast) {
            assert!((b.mean - 65.0).abs() < 1e-9);
        }
        assert_eq!(all.country, OVERALL);
        let one = project_overall(std::slice::from_ref(&r60)).unwrap();
        for (a, b) in one.forecast.iter().zip(&r60.forecast) {
            assert!((a.mean - b.mean).abs() < 1e-12);
            assert_eq!(a.lower95, b.lower95);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noisy = {
            let years = [2009, 2012, 2015, 2018, 2022];
            let ints: Vec<f64> = (0..500).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let input = ProjectionInput {
                country: "Z",
                group: Group::Boys,
                domain: Domain::Reading,
                cycle_years: &years,
                history_pct: &[50.0; 5],
                fitted: vec![ints.clone(); 5],
                intercepts: &ints,
                slope: SlopeDistribution::Normal { mean: 0.0, sd: 0.2 },
            };
            project_from_draws(&input, &FutureLoadings::default(), &mut rng).unwrap()
        };
        let twice = project_overall(&[noisy.clone(), noisy.clone()]).unwrap();
        for (a, b) in twice.forecast.iter().zip(&noisy.forecast) {
            assert!((a.mean - b.mean).abs() < 1e-12);
            assert_eq!((a.lower95, a.upper95), (b.lower95, b.upper95));
        }
        assert!(project_overall(&[]).is_err());
    }

    #[test]
    fn change_table_conventions() {
        let mut r = degenerate(logit(0.88).unwrap(), SlopeDistribution::Fixed(0.0), 10);
        r.history[0].1 = 88.0;
        r.forecast[1].mean = 66.0;
        let rows = change_table(&[r.clone()], 2009, 2033).unwrap();
        assert_eq!(rows[0].rounded(), (88, 66, -22));
        let same = change_table(&[r.clone()], 2009, 2009).unwrap();
        assert_eq!(same[0].change, 0.0);
        r.history[0].1 = 77.0;
        r.forecast[1].mean = 82.0;
        let mut buf = Vec::new();
        write_change_csv(&change_table(&[r.clone()], 2009, 2033).unwrap(), &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains(",77,82,+5"));
        assert!(matches!(change_table(&[r], 2009, 2050), Err(ProjectError::MissingYear(2050))));
    }

    #[test]
    fn outputs_render() {
        let r = degenerate(logit(0.7).unwrap(), SlopeDistribution::Normal { mean: -0.05, sd: 0.02 }, 200);
        let mut buf = Vec::new();
        write_projection_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("country,group,domain,year,kind,mean,lo95,hi95\n"));
        assert_eq!(text.lines().count(), 1 + 5 + 5 + 2);
        let svg = trajectory_svg(&r);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("stroke-dasharray"));
        let d = DensityCurve {
            grid: vec![-1.0, 0.0, 1.0],
            density: vec![0.1, 0.4, 0.1],
            lower95: -0.8,
            upper95: 0.8,
            expected: 0.0,
            observed: 0.1,
        };
        assert!(density_svg("X <boys>", &d, 0.2).contains("X &lt;boys&gt;"));
    }
}
