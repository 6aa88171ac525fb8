//! The library pipeline on the synthetic fixture, from raw CSV text to
//! projected change tables.

use profproj_core::bma::{bd_mcmc_bma, BdConfig, BmaProblem, GPriorSpec, ModelPriorSpec};
use profproj_core::impute::{exclude_sparse_rows, pmm_impute};
use profproj_core::lgcm::{posterior_slopes, unconditional_growth, GrowthData, GrowthPriors, LoadingSpec, McmcConfig};
use profproj_core::panel::{
    drop_collinear, load_panel_from_readers, make_difference_variables, standardize, DifferenceOptions, Domain, Group,
    IndicatorMetadataFile, PanelConfig,
};
use profproj_core::project::{change_table, project_country, project_overall, FutureLoadings, OVERALL};
use profproj_core::synthetic::{fixture, FIXTURE_SIGNALS};

#[test]
fn fixture_flows_from_csv_to_projections() {
    let fx = fixture(20240601);
    let meta = IndicatorMetadataFile::from_toml_str(&fx.metadata_toml).unwrap();
    let cfg = PanelConfig { cycles: vec![2009, 2012, 2015, 2018, 2022], countries: None };
    let panel = load_panel_from_readers(
        fx.outcomes_csv.as_bytes(),
        "outcomes.csv",
        Some((fx.indicators_csv.as_bytes(), "indicators.csv")),
        &meta,
        &cfg,
    )
    .unwrap();
    assert_eq!(panel.countries.len(), 53);

    let opts = DifferenceOptions { substitute: true, allow_missing: true };
    let raw = make_difference_variables(&panel.indicators, opts).unwrap();
    assert!(raw.missing_count() > 0);
    let (rows, excluded) = exclude_sparse_rows(&raw, 0.5);
    assert!(excluded.is_empty());
    let (done, report) = pmm_impute(&rows, 5, 1).unwrap();
    assert_eq!(report.n_missing_after, 0);
    let kept = drop_collinear(&done, 0.95).unwrap();
    let (z, _) = standardize(&kept).unwrap();
    assert_eq!(z.n_cols(), 29);

    let series = panel.select(Group::Boys, Domain::Reading);
    let data = GrowthData::from_series(&series, &cfg.cycles).unwrap();
    let mcmc = McmcConfig { chains: 2, iterations: 1500, burn_in: 500, seed: 3, ..McmcConfig::default() };
    let growth =
        unconditional_growth(&data, &LoadingSpec::m1(5).unwrap(), &GrowthPriors::default(), &mcmc).unwrap();
    let slopes: Vec<f64> = posterior_slopes(&growth).iter().map(|s| s.mean).collect();

    let x = z.select_rows(&data.countries);
    let problem = BmaProblem::new(&slopes, &x.to_matrix().unwrap(), x.columns.clone()).unwrap();
    let bd = BdConfig { iterations: 20_000, burn_in: 2_000, seed: 4, ..BdConfig::default() };
    let bma = bd_mcmc_bma(&problem, &GPriorSpec::Uip, &ModelPriorSpec::Uniform, &bd).unwrap();
    let pip = |name: &str| bma.pips[x.columns.iter().position(|c| c == name).unwrap()];
    let signal_pips: Vec<f64> = FIXTURE_SIGNALS.iter().map(|(n, _)| pip(n)).collect();
    let mean_pip = bma.pips.iter().sum::<f64>() / bma.pips.len() as f64;
    assert!(signal_pips.iter().filter(|&&p| p > mean_pip).count() >= 2, "{signal_pips:?} vs mean {mean_pip}");

    let future = FutureLoadings::default();
    let results: Vec<_> = (0..data.n_countries())
        .map(|i| {
            let hist: Vec<f64> = series[i].values.iter().map(|v| 100.0 * v).collect();
            let row = x.row(i).unwrap();
            project_country(&growth, i, Group::Boys, Domain::Reading, &hist, &bma, &row, &future, 9).unwrap()
        })
        .collect();
    let overall = project_overall(&results).unwrap();
    assert_eq!(overall.country, OVERALL);
    let rows = change_table(&results, 2009, 2033).unwrap();
    assert_eq!(rows.len(), 53);
    for (r, c) in results.iter().zip(&rows) {
        assert_eq!(c.base, r.history[0].1);
        assert!(r.forecast.iter().all(|b| 0.0 <= b.lower95 && b.upper95 <= 100.0));
    }
    let mean_2033: f64 = results.iter().map(|r| r.forecast[1].mean).sum::<f64>() / 53.0;
    assert!((overall.forecast[1].mean - mean_2033).abs() < 1e-9);
}
