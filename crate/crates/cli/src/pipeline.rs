//! Stage orchestration. Every command writes into a staging directory under
//! the output directory and moves its artifacts into place only when all
//! stages succeed; a lockfile keeps concurrent runs out of the same
//! directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use profproj_core::bma::{
    averaged_prediction, bd_mcmc_bma, enumerate_bma_capped, mix_moments, predictive_density,
    BmaProblem, BmaResult, GPriorSpec, ModelPriorSpec,
};
use profproj_core::impute::{exclude_sparse_rows, pmm_impute_with, ImputationReport};
use profproj_core::lgcm::{
    posterior_slopes, unconditional_growth, CountrySlope, GrowthData, GrowthPosterior, LooUnit, SpecLabel,
};
use profproj_core::panel::{
    drop_collinear, load_panel, make_difference_variables, standardize, DesignMatrix,
    DifferenceOptions, DroppedColumn, Domain, Exclusion, Group, IndicatorMetadataFile, OutcomeSeries,
    PanelConfig, PanelData, Standardization,
};
use profproj_core::project::{
    change_table, density_svg, project_all, project_country, project_overall, trajectory_svg,
    write_change_csv, write_projection_csv, ChangeRow, SlopeDistribution,
};
use profproj_core::reference::indicator_metadata;
use profproj_core::score::{
    kld_gaussian, kld_samples, log_predictive_score, psis_loo_with, write_comparison_csv,
    ComparisonRow, LooResult, LOO_MIN_DRAWS,
};
use profproj_core::stats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{hex, BmaMethodSetting, KldMethod, PipelineConfig, Seeds};
use crate::error::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Ingest,
    Impute,
    FitGrowth,
    Score,
    Bma,
    Project,
    Run,
    Sensitivity,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Ingest => "ingest",
            Command::Impute => "impute",
            Command::FitGrowth => "fit-growth",
            Command::Score => "score",
            Command::Bma => "bma",
            Command::Project => "project",
            Command::Run => "run",
            Command::Sensitivity => "sensitivity",
        }
    }
}

pub const MANIFEST: &str = "manifest.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
const LOCKFILE: &str = ".profproj.lock";
const STAGING: &str = ".staging";

/// Parameter priors of the sensitivity grid.
pub fn sensitivity_g_priors() -> [GPriorSpec; 5] {
    [
        GPriorSpec::Uip,
        GPriorSpec::Ric,
        GPriorSpec::Bric,
        GPriorSpec::Hq,
        GPriorSpec::HyperG { alpha: 3.0 },
    ]
}

/// Model-space priors of the sensitivity grid.
pub fn sensitivity_model_priors() -> [ModelPriorSpec; 3] {
    [
        ModelPriorSpec::Uniform,
        ModelPriorSpec::Binomial { theta: 0.5 },
        ModelPriorSpec::BetaBinomial { a: 1.0, b: 1.0 },
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_sha256: String,
    pub seeds: Seeds,
    pub cells: Vec<String>,
    pub models: Vec<SpecLabel>,
    pub projection_model: SpecLabel,
    pub artifacts: Vec<Artifact>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub out_dir: PathBuf,
    pub manifest: Manifest,
}

struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Lock, PipelineError> {
        let path = dir.join(LOCKFILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Config(format!(
                "{} is in use by another run (delete {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(PipelineError::output(path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

/// Artifacts staged for the current command, keyed by relative path.
struct Outputs {
    staging: PathBuf,
    files: BTreeMap<String, Artifact>,
}

impl Outputs {
    fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), PipelineError> {
        let path = self.staging.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| PipelineError::output(parent, e))?;
        }
        fs::write(&path, bytes).map_err(|e| PipelineError::output(&path, e))?;
        self.files.insert(
            rel.to_string(),
            Artifact {
                path: rel.to_string(),
                sha256: hex(&Sha256::digest(bytes)),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    fn json<T: Serialize>(&mut self, rel: &str, v: &T) -> Result<(), PipelineError> {
        let mut bytes = serde_json::to_vec_pretty(v)
            .map_err(|e| PipelineError::Numerical(format!("serializing {rel}: {e}")))?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    fn csv<F>(&mut self, rel: &str, f: F) -> Result<(), PipelineError>
    where
        F: FnOnce(&mut Vec<u8>) -> csv::Result<()>,
    {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(rel, &buf)
    }
}

/// Run `cmd` and commit its artifacts to the configured output directory.
pub fn execute(cmd: Command, cfg: &PipelineConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| PipelineError::output(&out, e))?;
    let _lock = Lock::acquire(&out)?;
    let staging = out.join(STAGING);
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| PipelineError::output(&staging, e))?;
    }
    fs::create_dir_all(&staging).map_err(|e| PipelineError::output(&staging, e))?;
    let mut outs = Outputs { staging: staging.clone(), files: BTreeMap::new() };
    let result = run_command(cmd, cfg, &mut outs).and_then(|cells| finish(cmd, cfg, &mut outs, cells));
    let manifest = match result {
        Ok(m) => m,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e);
        }
    };
    let commit = || -> Result<(), PipelineError> {
        for rel in outs.files.keys() {
            let (from, to) = (staging.join(rel), out.join(rel));
            if let Some(parent) = to.parent() {
                fs::create_dir_all(parent).map_err(|e| PipelineError::output(parent, e))?;
            }
            fs::rename(&from, &to).map_err(|e| PipelineError::output(&to, e))?;
        }
        Ok(())
    };
    let committed = commit();
    let _ = fs::remove_dir_all(&staging);
    committed?;
    Ok(RunReport { out_dir: out, manifest })
}

fn finish(
    cmd: Command,
    cfg: &PipelineConfig,
    outs: &mut Outputs,
    cells: Vec<String>,
) -> Result<Manifest, PipelineError> {
    outs.write(RESOLVED_CONFIG, cfg.resolved_toml().as_bytes())?;
    let manifest = Manifest {
        tool: "profproj".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: cmd.name().into(),
        config_sha256: cfg.hash(),
        seeds: cfg.seeds(),
        cells,
        models: cfg.run.models.clone(),
        projection_model: cfg.run.projection_model,
        artifacts: outs.files.values().cloned().collect(),
    };
    outs.json(MANIFEST, &manifest)?;
    Ok(manifest)
}

/// Panel, completed design and analysis country list.
struct Prepared {
    panel: PanelData,
    /// Standardized, imputed, collinearity-filtered predictors.
    design: Option<DesignMatrix>,
    countries: Vec<String>,
}

struct Cell {
    group: Group,
    domain: Domain,
    series: Vec<OutcomeSeries>,
    data: GrowthData,
    x: Option<DesignMatrix>,
}

impl Cell {
    fn dir(&self) -> String {
        format!("{}_{}", self.group, self.domain)
    }
}

#[derive(Serialize)]
struct IngestReport<'a> {
    cycles: Vec<i32>,
    n_countries: usize,
    countries: &'a [String],
    n_series: usize,
    excluded: &'a [Exclusion],
    ignored_indicators: &'a [String],
    indicators: &'a [String],
}

#[derive(Serialize)]
struct ImputeReport<'a> {
    imputation: &'a ImputationReport,
    dropped_columns: &'a [DroppedColumn],
    retained_columns: &'a [String],
    standardization: &'a Standardization,
}

fn run_command(cmd: Command, cfg: &PipelineConfig, outs: &mut Outputs) -> Result<Vec<String>, PipelineError> {
    let panel = ingest(cfg, outs, matches!(cmd, Command::Ingest | Command::Run))?;
    if cmd == Command::Ingest {
        return Ok(Vec::new());
    }
    let prepared = prepare(cfg, panel, outs, matches!(cmd, Command::Impute | Command::Run))?;
    if cmd == Command::Impute {
        return Ok(Vec::new());
    }
    let needs_bma = matches!(cmd, Command::Score | Command::Bma | Command::Project | Command::Run | Command::Sensitivity);
    if needs_bma && prepared.design.is_none() {
        return Err(PipelineError::Config(format!(
            "`{}` needs an indicator file (paths.indicators)",
            cmd.name()
        )));
    }
    let mut tables = Tables::default();
    let mut names = Vec::new();
    for &group in &cfg.run.groups {
        for &domain in &cfg.run.domains {
            let cell = make_cell(cfg, &prepared, group, domain)?;
            log::info!("{}: {} countries", cell.dir(), cell.data.n_countries());
            run_cell(cmd, cfg, &cell, outs, &mut tables)?;
            names.push(cell.dir());
        }
    }
    tables.write(outs)?;
    Ok(names)
}

fn ingest(cfg: &PipelineConfig, outs: &mut Outputs, write: bool) -> Result<PanelData, PipelineError> {
    let meta = match &cfg.paths.metadata {
        Some(p) => IndicatorMetadataFile::load(p)?,
        None => indicator_metadata(),
    };
    let pc = PanelConfig { cycles: cfg.panel.cycles.clone(), countries: cfg.panel.countries.clone() };
    let panel = load_panel(&cfg.paths.outcomes, cfg.paths.indicators.as_deref(), &meta, &pc)?;
    if panel.countries.len() < 3 {
        return Err(PipelineError::Data(format!(
            "only {} usable countries after ingestion",
            panel.countries.len()
        )));
    }
    for ex in &panel.excluded {
        log::warn!("excluded {}: {}", ex.country, ex.reason);
    }
    if write {
        outs.json(
            "ingest/report.json",
            &IngestReport {
                cycles: cfg.panel.cycles.clone(),
                n_countries: panel.countries.len(),
                countries: &panel.countries,
                n_series: panel.series.len(),
                excluded: &panel.excluded,
                ignored_indicators: &panel.ignored_indicators,
                indicators: &panel.indicators.names,
            },
        )?;
        if cfg.paths.indicators.is_some() {
            let dm = differences(cfg, &panel)?;
            outs.csv("ingest/differences.csv", |b| write_design_csv(&dm, b))?;
        }
    }
    Ok(panel)
}

fn differences(cfg: &PipelineConfig, panel: &PanelData) -> Result<DesignMatrix, PipelineError> {
    let opts = DifferenceOptions { substitute: cfg.panel.substitute, allow_missing: true };
    Ok(make_difference_variables(&panel.indicators, opts)?)
}

fn prepare(
    cfg: &PipelineConfig,
    panel: PanelData,
    outs: &mut Outputs,
    write: bool,
) -> Result<Prepared, PipelineError> {
    if cfg.paths.indicators.is_none() {
        let countries = panel.countries.clone();
        return Ok(Prepared { panel, design: None, countries });
    }
    let raw = differences(cfg, &panel)?;
    let (kept_rows, excluded) = exclude_sparse_rows(&raw, cfg.impute.max_missing_fraction);
    for ex in &excluded {
        log::warn!("excluded {}: {}", ex.country, ex.reason);
    }
    let (done, mut report) = pmm_impute_with(
        &kept_rows,
        cfg.impute.k_neighbors,
        cfg.seeds().impute,
        cfg.impute.max_sweeps,
    )?;
    report.excluded_countries = excluded;
    let kept = drop_collinear(&done, cfg.panel.collinearity_threshold)?;
    if kept.n_cols() == 0 {
        return Err(PipelineError::Data("no predictors left after filtering".into()));
    }
    let (z, st) = standardize(&kept)?;
    if write {
        outs.json(
            "impute/report.json",
            &ImputeReport {
                imputation: &report,
                dropped_columns: &kept.dropped,
                retained_columns: &kept.columns,
                standardization: &st,
            },
        )?;
        outs.csv("impute/design_completed.csv", |b| write_design_csv(&kept, b))?;
        outs.csv("impute/design_standardized.csv", |b| write_design_csv(&z, b))?;
    }
    let countries = panel
        .countries
        .iter()
        .filter(|c| z.countries.contains(c))
        .cloned()
        .collect();
    Ok(Prepared { panel, design: Some(z), countries })
}

fn write_design_csv(dm: &DesignMatrix, w: &mut Vec<u8>) -> csv::Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut header = vec!["country".to_string()];
    header.extend(dm.columns.iter().cloned());
    wr.write_record(&header)?;
    for (c, row) in dm.countries.iter().zip(&dm.cells) {
        let mut rec = vec![c.clone()];
        rec.extend(row.iter().map(|v| v.map(|v| format!("{v:.10e}")).unwrap_or_default()));
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}

fn make_cell(cfg: &PipelineConfig, p: &Prepared, group: Group, domain: Domain) -> Result<Cell, PipelineError> {
    let series: Vec<OutcomeSeries> = p
        .panel
        .select(group, domain)
        .into_iter()
        .filter(|s| p.countries.contains(&s.country))
        .collect();
    if series.len() < 3 {
        return Err(PipelineError::Data(format!("{group} {domain}: fewer than 3 countries")));
    }
    let data = GrowthData::from_series(&series, &cfg.panel.cycles)?;
    let x = p.design.as_ref().map(|z| z.select_rows(&data.countries));
    Ok(Cell { group, domain, series, data, x })
}

/// Cross-cell report tables.
#[derive(Default)]
struct Tables {
    comparison: Vec<ComparisonRow>,
    top_models: Vec<TopModelRow>,
    pips: Vec<(String, Vec<String>, Vec<f64>, Vec<f64>)>,
    changes: Vec<ChangeRow>,
    sensitivity: Vec<SensitivityRow>,
}

#[derive(Debug, Clone, Serialize)]
struct TopModelRow {
    group: Group,
    domain: Domain,
    rank: usize,
    mask_hex: String,
    size: usize,
    pmp: f64,
    frequency: Option<f64>,
    predictors: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub group: Group,
    pub domain: Domain,
    pub g_prior: String,
    pub model_prior: String,
    pub mean_kld: f64,
    pub pooled_kld: f64,
    pub mean_predicted_slope: f64,
    pub total_visited_mass: f64,
    pub top_model: String,
    pub top_pmp: f64,
}

impl Tables {
    fn write(&self, outs: &mut Outputs) -> Result<(), PipelineError> {
        if !self.comparison.is_empty() {
            outs.csv("tables/growth_comparison.csv", |b| write_comparison_csv(&self.comparison, b))?;
        }
        if !self.top_models.is_empty() {
            outs.csv("tables/top_models.csv", |b| {
                let mut wr = csv::Writer::from_writer(b);
                for r in &self.top_models {
                    wr.serialize(r)?;
                }
                wr.flush()?;
                Ok(())
            })?;
            outs.csv("tables/pip.csv", |b| self.write_pips(b))?;
        }
        if !self.changes.is_empty() {
            outs.csv("tables/projection_change.csv", |b| write_change_csv(&self.changes, b))?;
        }
        if !self.sensitivity.is_empty() {
            outs.csv("tables/sensitivity.csv", |b| {
                let mut wr = csv::Writer::from_writer(b);
                for r in &self.sensitivity {
                    wr.serialize(r)?;
                }
                wr.flush()?;
                Ok(())
            })?;
        }
        Ok(())
    }

    /// Wide PIP table: one row per predictor, PIP and posterior mean per cell.
    fn write_pips(&self, b: &mut Vec<u8>) -> csv::Result<()> {
        let mut wr = csv::Writer::from_writer(b);
        let mut header = vec!["predictor".to_string()];
        for (cell, ..) in &self.pips {
            header.push(format!("{cell}_pip"));
            header.push(format!("{cell}_post_mean"));
        }
        wr.write_record(&header)?;
        let mut names: Vec<&String> = Vec::new();
        for (_, n, ..) in &self.pips {
            for x in n {
                if !names.contains(&x) {
                    names.push(x);
                }
            }
        }
        for name in names {
            let mut rec = vec![name.clone()];
            for (_, n, pip, mean) in &self.pips {
                match n.iter().position(|x| x == name) {
                    Some(j) => {
                        rec.push(format!("{:.6}", pip[j]));
                        rec.push(format!("{:.6e}", mean[j]));
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }
}

fn fit(cfg: &PipelineConfig, cell: &Cell, label: SpecLabel) -> Result<GrowthPosterior, PipelineError> {
    let spec = cfg.loading_spec(label)?;
    log::info!("{}: fitting {label}", cell.dir());
    let post = unconditional_growth(&cell.data, &spec, &cfg.lgcm.priors, &cfg.mcmc())?;
    Ok(post)
}

fn run_cell(
    cmd: Command,
    cfg: &PipelineConfig,
    cell: &Cell,
    outs: &mut Outputs,
    tables: &mut Tables,
) -> Result<(), PipelineError> {
    let dir = cell.dir();
    let mut labels: Vec<SpecLabel> = match cmd {
        Command::FitGrowth | Command::Run => cfg.run.models.clone(),
        Command::Score if cfg.score.loo => cfg.run.models.clone(),
        _ => Vec::new(),
    };
    let pm = cfg.run.projection_model;
    let needs_projection_fit = matches!(cmd, Command::Score | Command::Bma | Command::Project | Command::Run | Command::Sensitivity);
    if needs_projection_fit && !labels.contains(&pm) {
        labels.push(pm);
    }
    let mut fits: Vec<(SpecLabel, GrowthPosterior)> = Vec::new();
    for label in labels {
        let post = fit(cfg, cell, label)?;
        let summaries = post.summaries();
        let flagged = GrowthPosterior::convergence_warnings(&summaries);
        if let Some(worst) = summaries.iter().filter(|s| s.rhat > 1.1).max_by(|a, b| a.rhat.total_cmp(&b.rhat)) {
            log::warn!(
                "{dir} {label}: R-hat > 1.1 for {} parameters (worst {:.3}, {})",
                flagged.len(),
                worst.rhat,
                worst.name
            );
        }
        if matches!(cmd, Command::FitGrowth | Command::Run) && cfg.run.models.contains(&label) {
            outs.json(&format!("{dir}/growth_{}.json", file_label(label)), &post.summary_json())?;
            if cfg.run.write_draws {
                outs.csv(&format!("{dir}/growth_{}_draws.csv", file_label(label)), |b| post.write_draws_csv(b))?;
            }
        }
        fits.push((label, post));
    }

    if matches!(cmd, Command::Score | Command::Run) && cfg.score.loo {
        for (label, post) in &fits {
            if !cfg.run.models.contains(label) {
                continue;
            }
            let loo = psis_loo_with(&post.log_lik(cfg.score.loo_unit), cfg.score.gpd.into(), LOO_MIN_DRAWS)?;
            if loo.n_bad_k > 0 {
                log::warn!("{dir} {label}: {} of {} LOO units ({}) with k-hat > 0.7", loo.n_bad_k, loo.pointwise.len(), cfg.score.loo_unit);
            }
            outs.json(&format!("{dir}/loo_{}.json", file_label(*label)), &LooJson::new(*label, cfg.score.loo_unit, &loo))?;
            tables.comparison.push(ComparisonRow {
                group: cell.group.to_string(),
                domain: cell.domain.to_string(),
                model: label.to_string(),
                start_pct: post.start_pct(),
                rate_pp: post.rate_pp(),
                elpd_loo: loo.elpd_loo,
                loo_ic: loo.loo_ic,
                n_bad_k: loo.n_bad_k,
            });
        }
    }
    if !needs_projection_fit {
        return Ok(());
    }
    let growth = &fits.iter().find(|(l, _)| *l == pm).expect("projection model fitted").1;
    let slopes = posterior_slopes(growth);
    let x = cell.x.as_ref().expect("design present");
    let problem = BmaProblem::new(
        &slopes.iter().map(|s| s.mean).collect::<Vec<_>>(),
        &x.to_matrix()?,
        x.columns.clone(),
    )?;

    if cmd == Command::Sensitivity {
        for g in sensitivity_g_priors() {
            for m in sensitivity_model_priors() {
                let res = run_bma(cfg, &problem, &g, &m)?;
                tables.sensitivity.push(sensitivity_row(cell, &res, growth, &slopes)?);
            }
        }
        return Ok(());
    }

    let bma = run_bma(cfg, &problem, &cfg.bma.g_prior, &cfg.bma.model_prior)?;
    for w in &bma.warnings {
        log::warn!("{dir} bma: {w}");
    }
    if matches!(cmd, Command::Bma | Command::Run) {
        outs.json(&format!("{dir}/bma.json"), &bma.to_json(cfg.bma.report_top))?;
        outs.csv(&format!("{dir}/pip.csv"), |b| bma.write_pip_csv(b))?;
        let q = bma.n_predictors();
        for (rank, m) in bma.models.iter().take(cfg.bma.report_top).enumerate() {
            tables.top_models.push(TopModelRow {
                group: cell.group,
                domain: cell.domain,
                rank: rank + 1,
                mask_hex: m.model.hex(q),
                size: m.model.size(),
                pmp: m.pmp,
                frequency: m.frequency,
                predictors: m.model.columns().iter().map(|&c| bma.names()[c].as_str()).collect::<Vec<_>>().join("; "),
            });
        }
        tables.pips.push((dir.clone(), bma.names().to_vec(), bma.pips.clone(), bma.coef.iter().map(|c| c.mean).collect()));
    }
    if matches!(cmd, Command::Score | Command::Run) && cfg.score.kld {
        let rows = kld_rows(cfg, cell, &bma, growth, &slopes)?;
        outs.csv(&format!("{dir}/kld.csv"), |b| {
            let mut wr = csv::Writer::from_writer(b);
            for r in &rows {
                wr.serialize(r)?;
            }
            wr.flush()?;
            Ok(())
        })?;
    }
    if matches!(cmd, Command::Project | Command::Run) {
        project_cell(cfg, cell, growth, &bma, &slopes, outs, tables)?;
    }
    Ok(())
}

fn run_bma(
    cfg: &PipelineConfig,
    problem: &BmaProblem,
    g: &GPriorSpec,
    m: &ModelPriorSpec,
) -> Result<BmaResult, PipelineError> {
    let q = problem.n_predictors();
    let enumerate = match cfg.bma.method {
        BmaMethodSetting::Enumerate => true,
        BmaMethodSetting::BdMcmc => false,
        BmaMethodSetting::Auto => q <= cfg.bma.enumerate_max,
    };
    let res = if enumerate {
        enumerate_bma_capped(problem, g, m, cfg.bma.enumerate_max)?
    } else {
        bd_mcmc_bma(problem, g, m, &cfg.bd_config())?
    };
    Ok(res)
}

#[derive(Debug, Clone, Serialize)]
struct LooJson<'a> {
    model: SpecLabel,
    unit: LooUnit,
    #[serde(flatten)]
    loo: &'a LooResult,
}

impl<'a> LooJson<'a> {
    fn new(model: SpecLabel, unit: LooUnit, loo: &'a LooResult) -> Self {
        LooJson { model, unit, loo }
    }
}

#[derive(Debug, Clone, Serialize)]
struct KldRow {
    country: String,
    unconditional_mean: f64,
    unconditional_sd: f64,
    predicted_mean: f64,
    predicted_sd: f64,
    kld: f64,
    lps: f64,
}

fn kld_rows(
    cfg: &PipelineConfig,
    cell: &Cell,
    bma: &BmaResult,
    growth: &GrowthPosterior,
    slopes: &[CountrySlope],
) -> Result<Vec<KldRow>, PipelineError> {
    let x = cell.x.as_ref().expect("design present");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().project);
    let mut rows = Vec::with_capacity(slopes.len());
    for (i, s) in slopes.iter().enumerate() {
        let row = x.row(i)?;
        let (pm, psd) = averaged_prediction(bma, &row)?;
        let kld = match cfg.score.kld_method {
            KldMethod::Gaussian => kld_gaussian(s.mean, s.sd, pm, psd)?,
            KldMethod::Samples => {
                let f = growth.pooled(growth.layout.pi1(i));
                let dist = SlopeDistribution::Mixture(bma.predictive_mixture(&row)?);
                let g = dist.sample_n(f.len(), &mut rng);
                kld_samples(&f, &g, 512)?
            }
        };
        rows.push(KldRow {
            country: s.country.clone(),
            unconditional_mean: s.mean,
            unconditional_sd: s.sd,
            predicted_mean: pm,
            predicted_sd: psd,
            kld,
            lps: log_predictive_score(pm, psd, s.mean)?,
        });
    }
    Ok(rows)
}

fn sensitivity_row(
    cell: &Cell,
    bma: &BmaResult,
    growth: &GrowthPosterior,
    slopes: &[CountrySlope],
) -> Result<SensitivityRow, PipelineError> {
    let x = cell.x.as_ref().expect("design present");
    let mut klds = Vec::with_capacity(slopes.len());
    let mut comps = Vec::with_capacity(slopes.len());
    for (i, s) in slopes.iter().enumerate() {
        let (pm, psd) = averaged_prediction(bma, &x.row(i)?)?;
        klds.push(kld_gaussian(s.mean, s.sd, pm, psd)?);
        comps.push((1.0, pm, psd));
    }
    let pooled: Vec<f64> = (0..slopes.len()).flat_map(|i| growth.pooled(growth.layout.pi1(i))).collect();
    let (gm, gsd) = mix_moments(&comps);
    let top = bma.models.first();
    Ok(SensitivityRow {
        group: cell.group,
        domain: cell.domain,
        g_prior: bma.g_spec.to_string(),
        model_prior: bma.model_prior.to_string(),
        mean_kld: stats::mean(&klds),
        pooled_kld: kld_gaussian(stats::mean(&pooled), stats::sd(&pooled), gm, gsd)?,
        mean_predicted_slope: gm,
        total_visited_mass: bma.total_visited_mass,
        top_model: top.map(|m| m.model.hex(bma.n_predictors())).unwrap_or_default(),
        top_pmp: top.map_or(0.0, |m| m.pmp),
    })
}

fn project_cell(
    cfg: &PipelineConfig,
    cell: &Cell,
    growth: &GrowthPosterior,
    bma: &BmaResult,
    slopes: &[CountrySlope],
    outs: &mut Outputs,
    tables: &mut Tables,
) -> Result<(), PipelineError> {
    let dir = cell.dir();
    let x = cell.x.as_ref().expect("design present");
    let future = cfg.future_loadings();
    let seed = cfg.seeds().project;
    let rows: Vec<Vec<f64>> = (0..x.n_rows()).map(|i| x.row(i)).collect::<Result<_, _>>()?;
    let mut results = project_all(cell.data.n_countries(), |i| {
        let hist: Vec<f64> = cell.series[i].values.iter().map(|v| 100.0 * v).collect();
        project_country(growth, i, cell.group, cell.domain, &hist, bma, &rows[i], &future, seed)
    })?;
    let overall = project_overall(&results)?;
    results.push(overall);
    outs.csv(&format!("{dir}/projection.csv"), |b| write_projection_csv(&results, b))?;
    let base = cfg.panel.cycles[0];
    if let Some(&target) = future.0.keys().last() {
        tables.changes.extend(change_table(&results, base, target)?);
    }
    if cfg.run.plots {
        for r in &results {
            outs.write(&format!("{dir}/plots/trajectory_{}.svg", slug(&r.country)), trajectory_svg(r).as_bytes())?;
        }
        for (i, s) in slopes.iter().enumerate() {
            let d = predictive_density(bma, i)?;
            let title = format!("{} — {} {} growth rate (expected vs unconditional)", s.country, cell.group, cell.domain);
            outs.write(&format!("{dir}/plots/density_{}.svg", slug(&s.country)), density_svg(&title, &d, s.mean).as_bytes())?;
        }
    }
    Ok(())
}

fn file_label(label: SpecLabel) -> String {
    label.to_string().to_lowercase()
}

/// File-name-safe form of a country label.
pub fn slug(s: &str) -> String {
    let mut out = String::new();
    for ch in s.chars() {
        if ch.is_alphanumeric() {
            out.extend(ch.to_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    out.trim_matches('_').to_string()
}

/// Read back a projection CSV written by `project`/`run`.
pub fn read_projection_csv(path: &Path) -> Result<Vec<ProjectionCsvRow>, PipelineError> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| PipelineError::Data(e.to_string()))?;
    rd.deserialize()
        .collect::<Result<Vec<ProjectionCsvRow>, _>>()
        .map_err(|e| PipelineError::Data(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct ProjectionCsvRow {
    pub country: String,
    pub group: String,
    pub domain: String,
    pub year: i32,
    pub kind: String,
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slugs() {
        assert_eq!(slug("Hong Kong (China)"), "hong_kong_china");
        assert_eq!(slug("Türkiye"), "türkiye");
        assert_eq!(slug(" ALL "), "all");
    }

    #[test]
    fn sensitivity_grid_is_5_by_3() {
        assert_eq!(sensitivity_g_priors().len() * sensitivity_model_priors().len(), 15);
    }
}
