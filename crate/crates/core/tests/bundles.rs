use std::fs;
use std::path::Path;

use qnet_core::engine::RunOptions;
use qnet_core::output::{DELIVERIES_HEADER, SUMMARY_HEADER};
use qnet_core::sweep::{aggregate_point, point_dir, run_sweep, SweepPlan};
use qnet_core::{read_deliveries, read_summary, run_scenario, ScenarioConfig};

const SCENARIO: &str = r#"
[run]
duration_s = 0.2
seed = 3
[transport]
cc = "aimd+aqm"
[[flows]]
count = 3
demand = { kind = "poisson", load = 0.9 }
[[regimes]]
name = "low"
start_s = 0.0
load = 0.5
[[regimes]]
name = "high"
start_s = 0.1
load = 0.995
"#;

fn bundle(cfg: &ScenarioConfig, dir: &Path) -> qnet_core::RunOutput {
    run_scenario(cfg, Some(dir), RunOptions::default()).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    v.sort();
    v
}

#[test]
fn bundle_has_every_file_with_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::from_toml_str(SCENARIO).unwrap();
    bundle(&cfg, dir.path());
    let names: Vec<String> = files(dir.path()).into_iter().map(|f| f.0).collect();
    assert_eq!(
        names,
        [
            "aqm_trace.csv",
            "config.toml",
            "deliveries.csv",
            "drops.csv",
            "manifest.toml",
            "summary.csv",
            "window_trace.csv"
        ]
    );
    let deliveries = fs::read_to_string(dir.path().join("deliveries.csv")).unwrap();
    assert_eq!(
        deliveries.lines().next().unwrap(),
        DELIVERIES_HEADER.join(",")
    );
    let summary = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(summary.lines().next().unwrap(), SUMMARY_HEADER.join(","));
    let manifest: toml::Table = fs::read_to_string(dir.path().join("manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(manifest["schema_version"].as_integer(), Some(1));
    assert_eq!(manifest["seed"].as_integer(), Some(3));
}

#[test]
fn csv_round_trip_reproduces_records_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::from_toml_str(SCENARIO).unwrap();
    let out = bundle(&cfg, dir.path());
    assert_eq!(
        read_deliveries(&dir.path().join("deliveries.csv")).unwrap(),
        out.deliveries
    );
    let rows = read_summary(&dir.path().join("summary.csv")).unwrap();
    let expected: Vec<_> = out.summary.rows().cloned().collect();
    assert_eq!(rows, expected);
    assert_eq!(rows[0].scope, "overall");
    assert_eq!(rows[1].scope, "regime:low");
    assert_eq!(rows[2].scope, "regime:high");
}

#[test]
fn echoed_config_reproduces_the_bundle() {
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::from_toml_str(SCENARIO)
        .unwrap()
        .with_seed(21);
    bundle(&cfg, first.path());
    let echo = ScenarioConfig::from_path(&first.path().join("config.toml")).unwrap();
    assert_eq!(echo.run.seed, 21);
    bundle(&echo, second.path());
    assert_eq!(files(first.path()), files(second.path()));
}

#[test]
fn malformed_csv_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ScenarioConfig::from_toml_str(SCENARIO).unwrap();
    bundle(&cfg, dir.path());
    let path = dir.path().join("deliveries.csv");
    let text = fs::read_to_string(&path).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    lines[2] = lines[2].replacen(',', ",x", 1);
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    let err = read_deliveries(&path).unwrap_err().to_string();
    assert!(err.contains("deliveries.csv:3"), "{err}");
}

#[test]
fn sweep_aggregate_matches_post_hoc_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!(
        "{SCENARIO}\n[sweep]\nseeds = 3\n[[sweep.parameters]]\nname = \"aqm.target_buffering_s\"\nvalues = [3e-4, 1e-3]\n"
    );
    let plan = SweepPlan::from_toml_str(&text).unwrap();
    let outcome = run_sweep(&plan, Some(dir.path())).unwrap();
    assert_eq!(outcome.aggregate.len(), 2);

    for (p, row) in plan.points.iter().zip(&outcome.aggregate) {
        let overall: Vec<_> = plan
            .seeds
            .iter()
            .map(|&s| {
                let rows =
                    read_summary(&point_dir(dir.path(), p.index, s).join("summary.csv")).unwrap();
                rows.into_iter().find(|r| r.scope == "overall").unwrap()
            })
            .collect();
        let labels = row.assignments.clone();
        assert_eq!(&aggregate_point(p.index, labels, &overall, 0), row);
        assert_eq!(row.runs_ok, 3);
    }

    let mut r = csv::Reader::from_path(dir.path().join("aggregate.csv")).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(
        &header[..4],
        ["point", "aqm.target_buffering_s", "runs_ok", "runs_failed"]
    );
    assert_eq!(r.records().count(), 2);

    // Each bundle's echoed config re-runs to the same summary.
    let echo =
        ScenarioConfig::from_path(&point_dir(dir.path(), 1, plan.seeds[2]).join("config.toml"))
            .unwrap();
    let again = run_scenario(&echo, None, RunOptions::default()).unwrap();
    assert_eq!(again.summary, outcome.points[1].runs[2].summary);
}

#[test]
fn presets_are_valid() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let fig4 = SweepPlan::from_path(&root.join("fig4_chain.toml")).unwrap();
    assert_eq!(fig4.points.len(), 3);
    assert_eq!(fig4.points[0].config.flows[0].count, 12);
    assert_eq!(fig4.points[0].config.regimes.len(), 4);
    let fig5 = SweepPlan::from_path(&root.join("fig5_sweep.toml")).unwrap();
    assert_eq!(fig5.points.len(), 15);
    assert_eq!(fig5.seeds.len(), 16);
    assert_eq!(fig5.run_count(), 240);
}

#[test]
fn fig4_preset_seed_one_has_two_regimes() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let cfg = ScenarioConfig::from_path(&root.join("fig4_chain.toml")).unwrap();
    let out = run_scenario(&cfg, None, RunOptions::default()).unwrap();
    assert_eq!(out.summary.regimes.len(), 2);
    let low = out.summary.regime("low").unwrap();
    let high = out.summary.regime("high").unwrap();
    assert_eq!((low.start, low.end), (0.0, 0.75));
    assert_eq!((high.start, high.end), (0.25, 1.0));
    assert!(!low.is_absent() && !high.is_absent());
    assert_eq!(
        low.deliveries + high.deliveries,
        out.summary.overall.deliveries
    );
}
