//! Single imputation of missing design-matrix cells by predictive mean
//! matching over chained regressions.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{DesignMatrix, Exclusion};
use crate::stats;

pub const DEFAULT_K_NEIGHBORS: usize = 5;
pub const DEFAULT_MAX_SWEEPS: usize = 10;
pub const DEFAULT_MAX_MISSING_FRACTION: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum ImputeError {
    #[error("k_neighbors must be positive")]
    ZeroNeighbors,
    #[error("column `{column}` has {observed} observed entries, need at least {needed}")]
    TooFewObserved {
        column: String,
        observed: usize,
        needed: usize,
    },
    #[error("no fully observed column to start the chained regressions")]
    NoCompleteColumn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputedCell {
    pub country: String,
    pub indicator: String,
    pub donor_country: String,
    pub donated_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImputationReport {
    pub method: String,
    pub filled: Vec<ImputedCell>,
    pub n_missing_before: usize,
    pub n_missing_after: usize,
    pub seed: u64,
    pub k_neighbors: usize,
    pub sweeps: usize,
    pub converged: bool,
    /// Columns whose regression was singular at some sweep; matched on
    /// distance to the column mean instead.
    pub fallbacks: Vec<String>,
    pub excluded_countries: Vec<Exclusion>,
    pub limitations: Vec<String>,
}

impl ImputationReport {
    fn empty(seed: u64, k: usize) -> Self {
        ImputationReport {
            method: "predictive mean matching (chained, single imputation)".into(),
            filled: Vec::new(),
            n_missing_before: 0,
            n_missing_after: 0,
            seed,
            k_neighbors: k,
            sweeps: 0,
            converged: true,
            fallbacks: Vec::new(),
            excluded_countries: Vec::new(),
            limitations: vec![
                "single imputation: between-imputation uncertainty is not propagated".into(),
            ],
        }
    }
}

/// Remove rows whose share of missing cells exceeds `max_missing_fraction`.
pub fn exclude_sparse_rows(
    x: &DesignMatrix,
    max_missing_fraction: f64,
) -> (DesignMatrix, Vec<Exclusion>) {
    let q = x.n_cols().max(1) as f64;
    let mut keep = Vec::new();
    let mut excluded = Vec::new();
    for (i, row) in x.cells.iter().enumerate() {
        let frac = row.iter().filter(|c| c.is_none()).count() as f64 / q;
        if frac > max_missing_fraction {
            excluded.push(Exclusion {
                country: x.countries[i].clone(),
                reason: format!(
                    "{:.0}% of indicators missing (limit {:.0}%)",
                    100.0 * frac,
                    100.0 * max_missing_fraction
                ),
            });
        } else {
            keep.push(x.countries[i].clone());
        }
    }
    (x.select_rows(&keep), excluded)
}

/// Fitted values of column `target` regressed (with intercept) on
/// `predictors` over `observed` rows. `None` when the normal equations are
/// singular or underdetermined.
fn regression_fit(
    current: &[Vec<f64>],
    target: usize,
    predictors: &[usize],
    observed: &[usize],
) -> Option<Vec<f64>> {
    let n = current.len();
    let p = predictors.len() + 1;
    if observed.len() <= p {
        return None;
    }
    let design = DMatrix::from_fn(n, p, |i, j| {
        if j == 0 {
            1.0
        } else {
            current[i][predictors[j - 1]]
        }
    });
    let obs_design = DMatrix::from_fn(observed.len(), p, |r, j| design[(observed[r], j)]);
    let y = DVector::from_iterator(observed.len(), observed.iter().map(|&i| current[i][target]));
    let xtx = obs_design.transpose() * &obs_design;
    let xty = obs_design.transpose() * y;
    let chol = xtx.clone().cholesky()?;
    let l = chol.l();
    let diag: Vec<f64> = (0..p).map(|k| l[(k, k)] * l[(k, k)]).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > 1e-12 * max) {
        return None;
    }
    let beta = chol.solve(&xty);
    Some((&design * beta).iter().copied().collect())
}

/// Predictive mean matching with chained equations.
///
/// Incomplete columns are visited in ascending order of missing count. Each
/// one is regressed on every other column that is currently complete; each
/// missing row receives the observed value of one of its `k` nearest
/// observed rows in fitted-value distance, chosen uniformly at random.
/// Sweeps repeat until no donor changes or `max_sweeps` is reached.
pub fn pmm_impute(
    x: &DesignMatrix,
    k_neighbors: usize,
    seed: u64,
) -> Result<(DesignMatrix, ImputationReport), ImputeError> {
    pmm_impute_with(x, k_neighbors, seed, DEFAULT_MAX_SWEEPS)
}

pub fn pmm_impute_with(
    x: &DesignMatrix,
    k_neighbors: usize,
    seed: u64,
    max_sweeps: usize,
) -> Result<(DesignMatrix, ImputationReport), ImputeError> {
    if k_neighbors == 0 {
        return Err(ImputeError::ZeroNeighbors);
    }
    let mut report = ImputationReport::empty(seed, k_neighbors);
    report.n_missing_before = x.missing_count();
    if report.n_missing_before == 0 {
        return Ok((x.clone(), report));
    }

    let n = x.n_rows();
    let q = x.n_cols();
    let missing: Vec<Vec<bool>> = (0..q)
        .map(|j| x.cells.iter().map(|r| r[j].is_none()).collect())
        .collect();
    let miss_count: Vec<usize> = missing.iter().map(|m| m.iter().filter(|&&b| b).count()).collect();
    for j in 0..q {
        let observed = n - miss_count[j];
        if miss_count[j] > 0 && observed < k_neighbors + 1 {
            return Err(ImputeError::TooFewObserved {
                column: x.columns[j].clone(),
                observed,
                needed: k_neighbors + 1,
            });
        }
    }
    if miss_count.iter().all(|&m| m > 0) {
        return Err(ImputeError::NoCompleteColumn);
    }

    let mut order: Vec<usize> = (0..q).filter(|&j| miss_count[j] > 0).collect();
    order.sort_by_key(|&j| (miss_count[j], j));

    // Working copy, row-major; missing cells hold 0.0 until first filled.
    let mut current: Vec<Vec<f64>> = x
        .cells
        .iter()
        .map(|r| r.iter().map(|c| c.unwrap_or(0.0)).collect())
        .collect();
    let mut complete: Vec<bool> = (0..q).map(|j| miss_count[j] == 0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut previous: Option<BTreeMap<(usize, usize), usize>> = None;
    let mut donors = BTreeMap::new();
    let mut fallback_cols = std::collections::BTreeSet::new();

    for sweep in 0..max_sweeps {
        donors = BTreeMap::new();
        for &j in &order {
            let predictors: Vec<usize> = (0..q).filter(|&p| p != j && complete[p]).collect();
            let observed: Vec<usize> = (0..n).filter(|&i| !missing[j][i]).collect();
            let fitted = regression_fit(&current, j, &predictors, &observed);
            let score: Vec<f64> = match &fitted {
                Some(f) => f.clone(),
                None => {
                    fallback_cols.insert(j);
                    let obs_vals: Vec<f64> = observed.iter().map(|&i| current[i][j]).collect();
                    let m = stats::mean(&obs_vals);
                    (0..n)
                        .map(|i| if missing[j][i] { m } else { current[i][j] })
                        .collect()
                }
            };
            for i in (0..n).filter(|&i| missing[j][i]) {
                let mut ranked: Vec<usize> = observed.clone();
                ranked.sort_by(|&a, &b| {
                    (score[a] - score[i])
                        .abs()
                        .total_cmp(&(score[b] - score[i]).abs())
                        .then(a.cmp(&b))
                });
                let pool = k_neighbors.min(ranked.len());
                let donor = ranked[rng.random_range(0..pool)];
                current[i][j] = current[donor][j];
                donors.insert((i, j), donor);
            }
            complete[j] = true;
        }
        report.sweeps = sweep + 1;
        if previous.as_ref() == Some(&donors) {
            report.converged = true;
            break;
        }
        report.converged = false;
        previous = Some(donors.clone());
    }

    let mut out = x.clone();
    for (&(i, j), &donor) in &donors {
        out.cells[i][j] = Some(current[donor][j]);
    }
    let mut filled: Vec<(usize, usize, usize)> = donors.iter().map(|(&(i, j), &d)| (j, i, d)).collect();
    filled.sort();
    report.filled = filled
        .into_iter()
        .map(|(j, i, d)| ImputedCell {
            country: x.countries[i].clone(),
            indicator: x.columns[j].clone(),
            donor_country: x.countries[d].clone(),
            donated_value: current[d][j],
        })
        .collect();
    report.fallbacks = fallback_cols.into_iter().map(|j| x.columns[j].clone()).collect();
    report.n_missing_after = out.missing_count();
    Ok((out, report))
}
