use rfde_lyap::harness::{
    parse_scenario, replay, run_scenario, summary_text, write_outputs, RunOptions, ScenarioReport, EXIT_FAIL, EXIT_PASS,
};

const FAILING: &str = r#"{
  "name": "inflated",
  "system": {"name": "example212"},
  "functional": {"name": "V212", "params": {"c": 1.5, "unchecked": true}},
  "grid_step": 0.004,
  "checks": [
    {"kind": "conditions", "form": "uniform_reachable_decay", "sample": {"histories": 20}},
    {"kind": "dplus_decay", "trajectories": 2, "horizon": 1.0}
  ]
}"#;

#[test]
fn empty_check_list_gives_valid_report() {
    let sc = parse_scenario(r#"{"name": "empty", "system": {"name": "scalar_decay"}}"#, "inline").unwrap();
    let out = run_scenario(&sc, &RunOptions::default()).unwrap();
    assert!(out.report.cert.checks.is_empty());
    assert!(out.report.cert.passed);
    assert_eq!(out.exit_code(), EXIT_PASS);
    let back = ScenarioReport::from_json(&out.report.to_json().unwrap()).unwrap();
    assert_eq!(back, out.report);
}

#[test]
fn failure_has_replayable_witnesses() {
    let sc = parse_scenario(FAILING, "inflated.json").unwrap();
    let out = run_scenario(&sc, &RunOptions::default()).unwrap();
    assert_eq!(out.exit_code(), EXIT_FAIL);
    let text = summary_text(&out.report, "inflated.json", "out/report.json");
    assert!(text.contains("rfde-lyap replay inflated.json --report out/report.json --check 0 --name reachable_decrease"));

    // round trip through JSON, as the replay command does
    let report = ScenarioReport::from_json(&out.report.to_json().unwrap()).unwrap();
    for (spec, name) in [(0, "reachable_decrease"), (0, "growth"), (1, "dplus_decay")] {
        let r = replay(&sc, &report, spec, name).unwrap();
        assert!(r.identical(), "{name}: {r:?}");
        assert!(r.lhs - r.rhs > 0.0);
    }
}

#[test]
fn outputs_are_written_and_stable() {
    let sc = parse_scenario(
        r#"{"name": "small", "system": {"name": "example212"}, "grid_step": 0.04, "seed": 9,
            "trajectories": 1, "trajectory_horizon": 1.0,
            "checks": [{"kind": "envelope", "spec": {"horizon": 2.0, "histories": 2, "signals": 1}, "decay": 0.5},
                       {"kind": "gronwall", "pairs": 3, "horizon": 1.0}]}"#,
        "inline",
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = run_scenario(&sc, &RunOptions::default()).unwrap();
    write_outputs(&a, dir.path(), "small.json").unwrap();
    let first = std::fs::read(dir.path().join("report.json")).unwrap();
    for f in ["summary.txt", "envelope_0.csv", "trajectory_0.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let b = run_scenario(&sc, &RunOptions::default()).unwrap();
    write_outputs(&b, dir.path(), "small.json").unwrap();
    assert_eq!(first, std::fs::read(dir.path().join("report.json")).unwrap());

    let other = run_scenario(
        &sc,
        &RunOptions {
            seed: Some(10),
            ..RunOptions::default()
        },
    )
    .unwrap();
    assert_eq!(other.report.seed, Some(10));
    assert_ne!(other.report.to_json().unwrap(), a.report.to_json().unwrap());
}
