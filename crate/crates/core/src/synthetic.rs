//! Synthetic data generators used by tests, the acceptance suite and the
//! bundled fixture.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::lgcm::GrowthData;

/// Generating values for a linear growth panel on the logit scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrowthTruth {
    pub beta00: f64,
    pub beta10: f64,
    pub sd_pi0: f64,
    pub sd_pi1: f64,
    pub corr: f64,
    pub sigma_y: f64,
}

impl Default for GrowthTruth {
    fn default() -> Self {
        GrowthTruth {
            beta00: 0.8,
            beta10: -0.05,
            sd_pi0: 0.5,
            sd_pi1: 0.04,
            corr: -0.2,
            sigma_y: 0.05,
        }
    }
}

/// Simulate `n` countries observed at the given loadings (cycle positions),
/// with an additive `shock` on the logit scale in the last cycle.
pub fn simulate_growth<R: Rng + ?Sized>(
    n: usize,
    loadings: &[i32],
    truth: &GrowthTruth,
    shock: f64,
    rng: &mut R,
) -> GrowthData {
    simulate_growth_with_truth(n, loadings, truth, shock, rng).0
}

/// As [`simulate_growth`], also returning the true country slopes.
pub fn simulate_growth_with_truth<R: Rng + ?Sized>(
    n: usize,
    loadings: &[i32],
    truth: &GrowthTruth,
    shock: f64,
    rng: &mut R,
) -> (GrowthData, Vec<f64>) {
    let mut y = Vec::with_capacity(n);
    let mut slopes = Vec::with_capacity(n);
    let last = loadings.len() - 1;
    for _ in 0..n {
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        let pi0 = truth.beta00 + truth.sd_pi0 * z0;
        let pi1 = truth.beta10
            + truth.sd_pi1 * (truth.corr * z0 + (1.0 - truth.corr * truth.corr).sqrt() * z1);
        slopes.push(pi1);
        let row = loadings
            .iter()
            .enumerate()
            .map(|(t, &l)| {
                let e: f64 = rng.sample(StandardNormal);
                pi0 + l as f64 * pi1 + truth.sigma_y * e + if t == last { shock } else { 0.0 }
            })
            .collect();
        y.push(row);
    }
    let data = GrowthData::new(
        (0..n).map(|i| format!("c{i}")).collect(),
        loadings.to_vec(),
        y,
    )
    .expect("simulated panel is well formed");
    (data, slopes)
}

/// Files of the bundled end-to-end fixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub outcomes_csv: String,
    pub indicators_csv: String,
    pub metadata_toml: String,
}

/// Indicators whose differences drive the simulated growth rates, with
/// their effect on the logit slope per standard deviation.
pub const FIXTURE_SIGNALS: [(&str, f64); 3] = [
    ("GDP (standardized)", 0.04),
    ("Human development index", -0.03),
    ("Expected years of schooling", 0.025),
];

/// Later member of each near-duplicate indicator pair in the fixture.
pub const FIXTURE_COLLINEAR: [(&str, &str); 2] = [
    (
        "Lower-secondary school starting age years",
        "Official entrance age to lower-secondary education years",
    ),
    (
        "Official entrance age to primary education years",
        "Primary school starting age years",
    ),
];

/// Build the 53-country synthetic fixture: outcome percentages for both
/// groups and domains over the five observed cycles, a long-format
/// indicator table with scattered missing cells and 2021 substitutes, and
/// the indicator metadata. Deterministic in `seed`.
pub fn fixture(seed: u64) -> Fixture {
    use crate::panel::inv_logit;
    use crate::reference::{indicator_metadata, COUNTRIES, INDICATORS, OBSERVED_YEARS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = COUNTRIES.len();
    let q = INDICATORS.len();
    let col = |name: &str| INDICATORS.iter().position(|i| i.0 == name).expect("known indicator");

    let mut z: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..q).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for (a, b) in FIXTURE_COLLINEAR {
        let (a, b) = (col(a), col(b));
        for row in z.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            row[b] = row[a] + 0.01 * e;
        }
    }

    let mut ind = csv::Writer::from_writer(Vec::new());
    ind.write_record(["country", "indicator", "year", "value"]).unwrap();
    for (i, country) in COUNTRIES.iter().enumerate() {
        for (j, &(name, _, end)) in INDICATORS.iter().enumerate() {
            let base = 50.0 + 10.0 * rng.sample::<f64, _>(StandardNormal);
            let end_value = base + 0.5 + 2.0 * z[i][j];
            let u: f64 = rng.random();
            let mut cells: Vec<(i32, Option<f64>)> = vec![(2009, Some(base))];
            if end == 2022 {
                let sub = end_value - 0.05 * rng.sample::<f64, _>(StandardNormal).abs();
                if u < 0.04 {
                    cells.push((2021, Some(sub)));
                    cells.push((2022, None));
                } else if u < 0.07 {
                    cells.push((2022, None));
                } else {
                    cells.push((2021, Some(sub)));
                    cells.push((2022, Some(end_value)));
                }
            } else if u < 0.04 {
                cells.push((2021, None));
            } else {
                cells.push((2021, Some(end_value)));
            }
            for (year, value) in cells {
                // Alternate between empty fields and absent rows for missing cells.
                if value.is_none() && (i + j) % 2 == 0 {
                    continue;
                }
                let v = value.map(|v| format!("{v:.4}")).unwrap_or_default();
                ind.write_record([*country, name, &year.to_string(), &v]).unwrap();
            }
        }
    }

    let signal: Vec<f64> = (0..n)
        .map(|i| FIXTURE_SIGNALS.iter().map(|&(name, b)| b * z[i][col(name)]).sum())
        .collect();
    let mut out = csv::Writer::from_writer(Vec::new());
    out.write_record(["country", "year", "group", "domain", "pct_min_prof"]).unwrap();
    let cells = [
        ("boys", "reading", 0.7, -0.06),
        ("girls", "reading", 1.3, -0.05),
        ("boys", "mathematics", 0.6, -0.04),
        ("girls", "mathematics", 0.55, -0.04),
    ];
    let level: Vec<f64> = (0..n).map(|_| 0.8 * rng.sample::<f64, _>(StandardNormal)).collect();
    for (group, domain, b00, b10) in cells {
        for i in 0..n {
            let pi0 = b00 + level[i] + 0.15 * rng.sample::<f64, _>(StandardNormal);
            let pi1 = b10 + signal[i] + 0.02 * rng.sample::<f64, _>(StandardNormal);
            for (t, year) in OBSERVED_YEARS.iter().enumerate() {
                let shock = if t == OBSERVED_YEARS.len() - 1 { -0.15 } else { 0.0 };
                let e: f64 = rng.sample(StandardNormal);
                let pct = 100.0 * inv_logit(pi0 + pi1 * t as f64 + shock + 0.05 * e);
                out.write_record([COUNTRIES[i], &year.to_string(), group, domain, &format!("{pct:.1}")])
                    .unwrap();
            }
        }
    }
    let text = |w: csv::Writer<Vec<u8>>| String::from_utf8(w.into_inner().unwrap()).unwrap();
    Fixture {
        outcomes_csv: text(out),
        indicators_csv: text(ind),
        metadata_toml: indicator_metadata().to_toml_string(),
    }
}
