use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rfde-lyap"))
}

#[test]
fn lists_builtins() {
    let out = bin().arg("list-systems").output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("example212"));
    let out = bin().arg("list-functionals").output().unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("V213"));
}

#[test]
fn exit_codes() {
    let dir = tempfile_dir();
    let bad = dir.join("bad.json");
    std::fs::write(&bad, "{\n  \"name\": \"x\",\n  \"nope\": 1\n}").unwrap();
    let out = bin().args(["run", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.json:3:"));

    let fail = dir.join("fail.json");
    std::fs::write(
        &fail,
        r#"{"name": "f", "system": {"name": "example212"}, "grid_step": 0.004,
            "functional": {"name": "V212", "params": {"c": 1.5, "unchecked": true}},
            "checks": [{"kind": "conditions", "form": "uniform_reachable_decay", "sample": {"histories": 10}}]}"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = bin()
        .args(["run", fail.to_str().unwrap(), "--quiet", "--out", out_dir.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin()
        .args([
            "replay",
            fail.to_str().unwrap(),
            "--report",
            out_dir.join("report.json").to_str().unwrap(),
            "--check",
            "0",
            "--name",
            "reachable_decrease",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("identical"));

    let out = bin().args(["run", "sampled_feedback", "--quiet"]).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

fn tempfile_dir() -> std::path::PathBuf {
    let d = std::env::temp_dir().join(format!("rfde-lyap-cli-{}", std::process::id()));
    std::fs::create_dir_all(&d).unwrap();
    d
}
