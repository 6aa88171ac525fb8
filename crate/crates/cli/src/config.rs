//! Pipeline configuration (TOML).

use std::path::{Path, PathBuf};

use profproj_core::bma::{BdConfig, GPriorSpec, ModelPriorSpec};
use profproj_core::impute::{DEFAULT_K_NEIGHBORS, DEFAULT_MAX_MISSING_FRACTION, DEFAULT_MAX_SWEEPS};
use profproj_core::lgcm::{GrowthPriors, LoadingSpec, LooUnit, McmcConfig, SpecLabel};
use profproj_core::panel::{Domain, Group, DEFAULT_COLLINEARITY_THRESHOLD};
use profproj_core::project::FutureLoadings;
use profproj_core::reference::OBSERVED_YEARS;
use profproj_core::score::GpdMethod;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; stage seeds default to fixed offsets from it.
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub panel: PanelSettings,
    #[serde(default)]
    pub future: FutureSettings,
    #[serde(default)]
    pub run: RunSettings,
    #[serde(default)]
    pub impute: ImputeSettings,
    #[serde(default)]
    pub lgcm: LgcmSettings,
    #[serde(default)]
    pub bma: BmaSettings,
    #[serde(default)]
    pub score: ScoreSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub outcomes: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub indicators: Option<PathBuf>,
    /// Indicator metadata; the built-in 31-indicator table when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PanelSettings {
    pub cycles: Vec<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub countries: Option<Vec<String>>,
    pub collinearity_threshold: f64,
    pub substitute: bool,
}

impl Default for PanelSettings {
    fn default() -> Self {
        PanelSettings {
            cycles: OBSERVED_YEARS.to_vec(),
            countries: None,
            collinearity_threshold: DEFAULT_COLLINEARITY_THRESHOLD,
            substitute: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FutureSettings {
    pub years: Vec<i32>,
    pub loadings: Vec<f64>,
}

impl Default for FutureSettings {
    fn default() -> Self {
        let d = FutureLoadings::default();
        FutureSettings {
            years: d.0.keys().copied().collect(),
            loadings: d.0.values().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub groups: Vec<Group>,
    pub domains: Vec<Domain>,
    /// Models fitted and compared.
    pub models: Vec<SpecLabel>,
    /// Model whose unconditional fit feeds model averaging and projection.
    pub projection_model: SpecLabel,
    /// Free-loading mask for M2; defaults to the last two cycles.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m2_free: Option<Vec<bool>>,
    pub plots: bool,
    pub write_draws: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            groups: vec![Group::Boys, Group::Girls],
            domains: vec![Domain::Reading, Domain::Mathematics],
            models: vec![SpecLabel::M0, SpecLabel::M1, SpecLabel::M2],
            projection_model: SpecLabel::M1,
            m2_free: None,
            plots: true,
            write_draws: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImputeSettings {
    pub k_neighbors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub max_missing_fraction: f64,
    pub max_sweeps: usize,
}

impl Default for ImputeSettings {
    fn default() -> Self {
        ImputeSettings {
            k_neighbors: DEFAULT_K_NEIGHBORS,
            seed: None,
            max_missing_fraction: DEFAULT_MAX_MISSING_FRACTION,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LgcmSettings {
    pub chains: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub target_acceptance: f64,
    pub priors: GrowthPriors,
}

impl Default for LgcmSettings {
    fn default() -> Self {
        let m = McmcConfig::default();
        LgcmSettings {
            chains: m.chains,
            iterations: m.iterations,
            burn_in: m.burn_in,
            thin: m.thin,
            seed: None,
            target_acceptance: m.target_acceptance,
            priors: GrowthPriors::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BmaMethodSetting {
    /// Enumerate when the model space is small enough, otherwise sample.
    Auto,
    Enumerate,
    BdMcmc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BmaSettings {
    pub g_prior: GPriorSpec,
    pub model_prior: ModelPriorSpec,
    pub method: BmaMethodSetting,
    /// Largest predictor count enumerated under `auto`.
    pub enumerate_max: usize,
    pub iterations: usize,
    pub burn_in: usize,
    pub chains: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub mass_top_models: usize,
    /// Models listed in reports.
    pub report_top: usize,
}

impl Default for BmaSettings {
    fn default() -> Self {
        let bd = BdConfig::default();
        BmaSettings {
            g_prior: GPriorSpec::Uip,
            model_prior: ModelPriorSpec::Uniform,
            method: BmaMethodSetting::Auto,
            enumerate_max: 20,
            iterations: bd.iterations,
            burn_in: bd.burn_in,
            chains: bd.chains,
            seed: None,
            mass_top_models: bd.mass_top_models,
            report_top: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KldMethod {
    Gaussian,
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreSettings {
    pub loo: bool,
    pub loo_unit: LooUnit,
    pub kld: bool,
    pub kld_method: KldMethod,
    pub gpd: GpdSetting,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GpdSetting {
    ZhangStephens,
    Moments,
}

impl From<GpdSetting> for GpdMethod {
    fn from(g: GpdSetting) -> Self {
        match g {
            GpdSetting::ZhangStephens => GpdMethod::ZhangStephens,
            GpdSetting::Moments => GpdMethod::Moments,
        }
    }
}

impl Default for ScoreSettings {
    fn default() -> Self {
        ScoreSettings {
            loo: true,
            loo_unit: LooUnit::Country,
            kld: true,
            kld_method: KldMethod::Gaussian,
            gpd: GpdSetting::ZhangStephens,
        }
    }
}

/// Stage seeds after resolving defaults against the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub impute: u64,
    pub lgcm: u64,
    pub bma: u64,
    pub project: u64,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub group: Option<Group>,
    pub domain: Option<Domain>,
    pub model: Option<SpecLabel>,
}

impl PipelineConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, PipelineError> {
        toml::from_str(s).map_err(|e| PipelineError::Config(format!("invalid config: {e}")))
    }

    /// Read a config file; relative input paths are resolved against its
    /// directory.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    /// Apply command-line overrides. A seed override replaces every stage
    /// seed so a run is fully determined by it.
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
            self.impute.seed = None;
            self.lgcm.seed = None;
            self.bma.seed = None;
        }
        if let Some(out) = &o.out {
            self.paths.out = Some(out.clone());
        }
        if let Some(g) = o.group {
            self.run.groups = vec![g];
        }
        if let Some(d) = o.domain {
            self.run.domains = vec![d];
        }
        if let Some(m) = o.model {
            self.run.projection_model = m;
        }
    }

    pub fn seeds(&self) -> Seeds {
        Seeds {
            impute: self.impute.seed.unwrap_or(self.seed),
            lgcm: self.lgcm.seed.unwrap_or(self.seed.wrapping_add(1)),
            bma: self.bma.seed.unwrap_or(self.seed.wrapping_add(2)),
            project: self.seed.wrapping_add(3),
        }
    }

    pub fn out_dir(&self) -> Result<&Path, PipelineError> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| PipelineError::Config("no output directory (set paths.out or --out)".into()))
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        if self.run.groups.is_empty() || self.run.domains.is_empty() {
            return bad("at least one group and one domain must be selected");
        }
        if self.run.models.is_empty() {
            return bad("run.models is empty");
        }
        if self.future.years.len() != self.future.loadings.len() {
            return bad("future.years and future.loadings differ in length");
        }
        if !(self.panel.collinearity_threshold > 0.0 && self.panel.collinearity_threshold <= 1.0) {
            return bad("panel.collinearity_threshold must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.impute.max_missing_fraction) {
            return bad("impute.max_missing_fraction must lie in [0, 1]");
        }
        if self.impute.k_neighbors == 0 {
            return bad("impute.k_neighbors must be >= 1");
        }
        if self.bma.chains == 0 || self.bma.burn_in >= self.bma.iterations {
            return bad("bma needs chains >= 1 and burn_in < iterations");
        }
        self.mcmc().validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        self.bma
            .model_prior
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        for &m in &self.run.models {
            self.loading_spec(m)?;
        }
        self.loading_spec(self.run.projection_model)?;
        Ok(())
    }

    pub fn mcmc(&self) -> McmcConfig {
        McmcConfig {
            chains: self.lgcm.chains,
            iterations: self.lgcm.iterations,
            burn_in: self.lgcm.burn_in,
            thin: self.lgcm.thin,
            seed: self.seeds().lgcm,
            target_acceptance: self.lgcm.target_acceptance,
        }
    }

    pub fn bd_config(&self) -> BdConfig {
        BdConfig {
            iterations: self.bma.iterations,
            burn_in: self.bma.burn_in,
            chains: self.bma.chains,
            seed: self.seeds().bma,
            mass_top_models: self.bma.mass_top_models,
        }
    }

    pub fn loading_spec(&self, label: SpecLabel) -> Result<LoadingSpec, PipelineError> {
        let t = self.panel.cycles.len();
        let spec = match (label, &self.run.m2_free) {
            (SpecLabel::M2, Some(mask)) => LoadingSpec::with_free_mask(SpecLabel::M2, mask),
            _ => LoadingSpec::from_label(label, t),
        };
        spec.map_err(|e| PipelineError::Config(format!("model {label}: {e}")))
    }

    pub fn future_loadings(&self) -> FutureLoadings {
        FutureLoadings(
            self.future
                .years
                .iter()
                .copied()
                .zip(self.future.loadings.iter().copied())
                .collect(),
        )
    }

    /// Copy written next to the outputs: every seed explicit, output path
    /// omitted so the text does not depend on where the run was written.
    pub fn resolved(&self) -> PipelineConfig {
        let seeds = self.seeds();
        let mut c = self.clone();
        c.paths.out = None;
        c.impute.seed = Some(seeds.impute);
        c.lgcm.seed = Some(seeds.lgcm);
        c.bma.seed = Some(seeds.bma);
        c
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(&self.resolved()).expect("config serializes")
    }

    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.resolved_toml().as_bytes()))
    }
}

impl Paths {
    fn resolve_against(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.outcomes);
        if let Some(p) = self.indicators.as_mut() {
            fix(p);
        }
        if let Some(p) = self.metadata.as_mut() {
            fix(p);
        }
        if let Some(p) = self.out.as_mut() {
            fix(p);
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Annotated example configuration.
pub const EXAMPLE_CONFIG: &str = r#"# Master seed. Stage seeds default to seed .. seed+3 (impute, lgcm, bma, project).
seed = 20240601

[paths]
outcomes = "outcomes.csv"       # country,year,group,domain,pct_min_prof
indicators = "indicators.csv"   # country,indicator,year,value (empty value = missing)
metadata = "indicators.toml"    # per-indicator end/start/substitute years
out = "out"

[panel]
cycles = [2009, 2012, 2015, 2018, 2022]
collinearity_threshold = 0.95
substitute = true               # use 2021 when the 2022 value is missing

[future]
years = [2029, 2033]
loadings = [5.0, 6.0]

[run]
groups = ["boys", "girls"]
domains = ["reading", "mathematics"]
models = ["m0", "m1", "m2"]
projection_model = "m1"
plots = true
write_draws = false

[impute]
k_neighbors = 5
max_missing_fraction = 0.5
max_sweeps = 10

[lgcm]
chains = 4
iterations = 10000              # includes burn-in
burn_in = 5000
thin = 1
target_acceptance = 0.44

[lgcm.priors]
gamma_var = 100.0
resid_location = 0.0
resid_scale = 2.5
eta_scale = [[1.0, 0.0], [0.0, 1.0]]
free_loading_sd = 10.0

[bma]
g_prior = { kind = "uip" }      # uip | ric | bric | hq | hyper_g (alpha) | fixed (g)
model_prior = { kind = "uniform" }   # uniform | binomial (theta) | beta_binomial (a, b)
method = "auto"                 # auto | enumerate | bd_mcmc
enumerate_max = 20
iterations = 200000
burn_in = 20000
chains = 2
mass_top_models = 100
report_top = 10

[score]
loo = true
loo_unit = "country"            # country (growth factors integrated out) | cell
kld = true
kld_method = "gaussian"         # gaussian | samples
gpd = "zhang_stephens"          # zhang_stephens | moments
"#;
