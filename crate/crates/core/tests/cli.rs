use std::fs;
use std::process::{Command, Output};

fn epiident(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiident")).args(args).output().unwrap()
}

#[test]
fn exit_codes() {
    assert_eq!(epiident(&["--help"]).status.code(), Some(0));
    assert_eq!(epiident(&["scenarios", "list"]).status.code(), Some(0));
    assert_eq!(epiident(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(epiident(&["--threads", "0", "scenarios", "list"]).status.code(), Some(1));
    assert_eq!(epiident(&["simulate", "--alpha", "-1"]).status.code(), Some(1));

    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = blocker.join("sub");
    let o = epiident(&["simulate", "--runs", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn scenario_listing_has_sixteen_rows_in_r0_order() {
    let o = epiident(&["scenarios", "list", "--format", "csv"]);
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 17);
    assert!(lines[1].contains("0.33") && lines[16].contains("0.002"));
}

#[test]
fn simulate_writes_outputs_and_completed_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let o = epiident(&["simulate", "--runs", "5", "--seed", "7", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["ensemble.csv", "ode.csv", "ensemble.svg", "manifest.json"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["status"], "complete");
    assert_eq!(m["master_seed"], 7);
    let csv = fs::read_to_string(out.join("ensemble.csv")).unwrap();
    assert!(csv.starts_with("run_id,t,I"));

    let rep = tmp.path().join("rep");
    let o = epiident(&["report", tmp.path().to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(o.status.success());
    let text = fs::read_to_string(rep.join("report.md")).unwrap();
    assert!(text.contains("ensemble.svg"), "{text}");
}

#[test]
fn same_seed_same_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = tmp.path().join(name);
        let o = epiident(&["residuals", "--runs", "20", "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        fs::read(out.join("acf.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}
