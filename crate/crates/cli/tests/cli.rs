use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn propaudit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_propaudit"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn fixture(dir: &Path, extra: &[&str]) {
    let mut args = vec!["fixture", "--out", dir.to_str().unwrap(), "--seed", "4", "--effect", "1.0"];
    args.extend(extra);
    let out = propaudit(&args);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn audit_writes_every_output() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixture(&fx, &[]);
    let out = tmp.path().join("audit");
    let o = propaudit(&[
        "audit",
        "--data",
        &path(&fx, "data.csv"),
        "--manifest",
        &path(&fx, "manifest.json"),
        "--out",
        out.to_str().unwrap(),
        "--permutations",
        "199",
        "--label",
        "fixture",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for name in [
        "significance.csv",
        "significance.json",
        "significance.txt",
        "skipped.json",
        "usage.json",
        "run_manifest.json",
    ] {
        assert!(out.join(name).is_file(), "missing {name}");
    }
    let usage: serde_json::Value = serde_json::from_slice(&fs::read(out.join("usage.json")).unwrap()).unwrap();
    assert_eq!(usage["run_label"], "fixture");
    assert_eq!(usage["evaluated"], 14);
    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(out.join("run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "audit");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(manifest["config"]["permutations"], 199);
}

#[test]
fn missing_manifest_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = propaudit(&["audit", "--data", "nowhere.csv", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("--manifest") && err.contains("usage"), "{err}");
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, r#"{"alpha": 0.05, "bogus": 1}"#).unwrap();
    let o = propaudit(&["calibrate", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn all_strata_too_small_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixture(&fx, &["--n", "70"]);
    let o = propaudit(&[
        "audit",
        "--data",
        &path(&fx, "data.csv"),
        "--manifest",
        &path(&fx, "manifest.json"),
        "--out",
        &path(tmp.path(), "audit"),
    ]);
    assert_eq!(o.status.code(), Some(3));
    let skipped: serde_json::Value =
        serde_json::from_slice(&fs::read(tmp.path().join("audit/skipped.json")).unwrap()).unwrap();
    assert_eq!(skipped.as_array().unwrap().len(), 14);
}

#[test]
fn few_trials_warn_and_config_supplies_defaults() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("config.json");
    fs::write(&cfg, r#"{"trials": 4, "permutations": 49, "scm": {"n": 120}}"#).unwrap();
    let out = tmp.path().join("cal");
    let o = propaudit(&[
        "calibrate",
        "--config",
        cfg.to_str().unwrap(),
        "--tests",
        "rcot,cmiknn",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(out.join("calibration.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["trials"], 4);
    assert_eq!(report["report"]["alpha"], 0.05);
    assert_eq!(report["report"]["spec"]["n"], 120);
    assert_eq!(report["report"]["results"].as_array().unwrap().len(), 2);
    assert_eq!(report["uniformity"].as_array().unwrap().len(), 2);
}

#[test]
fn pipeline_kind_cannot_be_calibrated() {
    let tmp = tempfile::tempdir().unwrap();
    let o = propaudit(&["calibrate", "--kind", "pipeline", "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fixture_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    fixture(&a, &[]);
    fixture(&b, &[]);
    for name in ["data.csv", "manifest.json", "ground_truth.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn accuracy_trend_and_symmetry_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let fx = tmp.path().join("fx");
    fixture(&fx, &["--property-kind", "binary"]);
    let data = path(&fx, "data.csv");
    let manifest = path(&fx, "manifest.json");

    let acc = tmp.path().join("acc");
    let o = propaudit(&["accuracy", "--data", &data, "--manifest", &manifest, "--group-by", "P_I", "--out", acc.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(acc.join("accuracy.txt")).unwrap();
    assert!(text.contains("P_I=0") && text.contains("P_I=1"), "{text}");

    let trend = tmp.path().join("trend");
    let o = propaudit(&[
        "trend", "--data", &data, "--manifest", &manifest, "--class", "happy", "--svg", "--out", trend.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(trend.join("groups_P_D_happy.json").is_file());
    assert!(fs::read_to_string(trend.join("groups_P_D_happy.svg")).unwrap().starts_with("<svg"));

    let landmarks = tmp.path().join("landmarks.csv");
    fs::write(&landmarks, "sample_id,lx,ly,rx,ry,nx,ny,sx,sy\na,10,20,30,20,20,25,20,40\nb,10,20,30,40,20,25,25,30\n").unwrap();
    let sym = tmp.path().join("sym");
    let o = propaudit(&["symmetry", "--landmarks", landmarks.to_str().unwrap(), "--out", sym.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(sym.join("symmetry.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().contains(",45,"), "{csv}");
}
