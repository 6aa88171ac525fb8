mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use profproj_cli::config::EXAMPLE_CONFIG;
use profproj_cli::PipelineConfig;

fn profproj(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_profproj")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// A one-cell configuration over the bundled fixture with small samplers.
fn small_config(dir: &Path, outcomes: Option<&Path>, extra: &str) -> PathBuf {
    let fx = common::fixture_dir().canonicalize().unwrap();
    let outcomes = outcomes.map(Path::to_path_buf).unwrap_or_else(|| fx.join("outcomes.csv"));
    let text = format!(
        r#"seed = 11

[paths]
outcomes = "{}"
indicators = "{}"
metadata = "{}"

[run]
groups = ["boys"]
domains = ["reading"]
models = ["m0", "m1"]
projection_model = "m1"
plots = false

[lgcm]
chains = 2
iterations = 1200
burn_in = 200

[bma]
iterations = 3000
burn_in = 300
chains = 1
{extra}"#,
        outcomes.display(),
        fx.join("indicators.csv").display(),
        fx.join("indicators.toml").display(),
    );
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn ingest_reads_the_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "");
    let out = tmp.path().join("out");
    let r = profproj(&["ingest", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let report = json(&out.join("ingest/report.json"));
    assert_eq!(report["n_countries"], 53);
    assert_eq!(report["n_series"], 212);
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["command"], "ingest");
    assert!(!out.join(".staging").exists());
    assert!(!out.join(".profproj.lock").exists());
}

#[test]
fn malformed_outcomes_fail_with_data_code_and_leave_nothing_behind() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    let good = fs::read_to_string(common::fixture_dir().join("outcomes.csv")).unwrap();
    let mut lines: Vec<String> = good.lines().map(String::from).collect();
    lines[3] = lines[3].rsplit_once(',').map(|(a, _)| format!("{a},not-a-number")).unwrap();
    fs::write(&bad, lines.join("\n")).unwrap();
    let cfg = small_config(tmp.path(), Some(&bad), "");
    let out = tmp.path().join("out");
    let r = profproj(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 3, "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("error: data error"));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 0);
}

#[test]
fn config_errors_exit_with_code_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "[score]\nloo_unit = \"region\"\n");
    assert_eq!(code(&profproj(&["ingest", "--config", s(&cfg)])), 2);

    let cfg = small_config(tmp.path(), None, "[lgcm.extra]\nfoo = 1\n");
    assert_eq!(code(&profproj(&["ingest", "--config", s(&cfg)])), 2);

    let missing = tmp.path().join("nope.toml");
    assert_eq!(code(&profproj(&["ingest", "--config", s(&missing)])), 2);

    let cfg = small_config(tmp.path(), None, "");
    let r = profproj(&["fit-growth", "--config", s(&cfg), "--model", "m7"]);
    assert_ne!(code(&r), 0);
}

#[test]
fn existing_lock_blocks_a_second_writer() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "");
    let out = tmp.path().join("out");
    fs::create_dir_all(&out).unwrap();
    fs::write(out.join(".profproj.lock"), "1\n").unwrap();
    let r = profproj(&["ingest", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 2);
    assert!(out.join(".profproj.lock").exists(), "a foreign lock must not be removed");
    assert!(!out.join("manifest.json").exists());
}

#[test]
fn imputation_leaves_no_missing_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "");
    let out = tmp.path().join("out");
    assert_eq!(code(&profproj(&["impute", "--config", s(&cfg), "--out", s(&out)])), 0);
    let report = json(&out.join("impute/report.json"));
    assert!(report["imputation"]["n_missing_before"].as_u64().unwrap() > 0);
    assert_eq!(report["imputation"]["n_missing_after"], 0);
    assert_eq!(report["retained_columns"].as_array().unwrap().len(), 29);
    let completed = fs::read_to_string(out.join("impute/design_completed.csv")).unwrap();
    assert_eq!(completed.lines().count(), 54);
    assert!(!completed.contains(",,") && !completed.contains("NaN"));
}

#[test]
fn model_and_cell_overrides_reach_the_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "");
    let out = tmp.path().join("out");
    let r = profproj(&[
        "fit-growth", "--config", s(&cfg), "--out", s(&out), "--model", "m1", "--group", "boys", "--domain",
        "reading",
    ]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let manifest = json(&out.join("manifest.json"));
    assert_eq!(manifest["models"], serde_json::json!(["m1"]));
    assert_eq!(manifest["cells"], serde_json::json!(["boys_reading"]));
    assert!(out.join("boys_reading/growth_m1.json").exists());
    assert!(!out.join("boys_reading/growth_m0.json").exists());
    let artifacts = manifest["artifacts"].as_array().unwrap();
    assert!(artifacts.iter().all(|a| a["sha256"].as_str().unwrap().len() == 64));
}

#[test]
fn run_writes_projection_and_comparison_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "");
    let out = tmp.path().join("out");
    let r = profproj(&["run", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let loo = json(&out.join("boys_reading/loo_m1.json"));
    assert_eq!(loo["unit"], "country");
    assert_eq!(loo["pointwise"].as_array().unwrap().len(), 53);
    let comparison = fs::read_to_string(out.join("tables/growth_comparison.csv")).unwrap();
    assert_eq!(comparison.lines().count(), 3);
    let projection = fs::read_to_string(out.join("boys_reading/projection.csv")).unwrap();
    let forecasts: Vec<&str> = projection.lines().filter(|l| l.contains(",forecast,")).collect();
    assert_eq!(forecasts.len(), 54 * 2);
    for line in forecasts {
        let v: Vec<f64> = line.rsplitn(4, ',').take(3).map(|x| x.parse().unwrap()).collect();
        assert!(v.iter().all(|x| (0.0..=100.0).contains(x)), "{line}");
    }
    let change = fs::read_to_string(out.join("tables/projection_change.csv")).unwrap();
    assert!(change.lines().count() > 1);
}

#[test]
fn sensitivity_covers_the_prior_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), None, "");
    let out = tmp.path().join("out");
    let r = profproj(&["sensitivity", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&r), 0, "{}", String::from_utf8_lossy(&r.stderr));
    let mut reader = csv::Reader::from_path(out.join("tables/sensitivity.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 15);
    let col = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (g, m) = (col("g_prior"), col("model_prior"));
    for gp in ["UIP", "RIC", "BRIC", "HQ", "hyper-g(alpha=3)"] {
        let cell: Vec<&csv::StringRecord> = rows.iter().filter(|r| &r[g] == gp).collect();
        assert_eq!(cell.len(), 3, "{gp}");
        // binomial(0.5) is the uniform prior: every other column agrees.
        let strip = |r: &csv::StringRecord| {
            r.iter().enumerate().filter(|(i, _)| *i != m).map(|(_, v)| v.to_string()).collect::<Vec<_>>()
        };
        let uniform = cell.iter().find(|r| &r[m] == "uniform").unwrap();
        let binomial = cell.iter().find(|r| r[m].starts_with("binomial")).unwrap();
        assert_eq!(strip(uniform), strip(binomial), "{gp}");
    }
}

#[test]
fn example_config_is_valid() {
    let r = profproj(&["example-config"]);
    assert_eq!(code(&r), 0);
    let text = String::from_utf8(r.stdout).unwrap();
    assert_eq!(text, EXAMPLE_CONFIG);
    let cfg = PipelineConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.run.models.len(), 3);
}

#[test]
fn library_run_matches_binary_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = small_config(tmp.path(), None, "");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert_eq!(code(&profproj(&["fit-growth", "--config", s(&cfg_path), "--out", s(&a)])), 0);
    let mut cfg = PipelineConfig::load(&cfg_path).unwrap();
    cfg.paths.out = Some(b.clone());
    profproj_cli::execute(profproj_cli::Command::FitGrowth, &cfg).unwrap();
    assert_eq!(common::snapshot(&a), common::snapshot(&b));
}
