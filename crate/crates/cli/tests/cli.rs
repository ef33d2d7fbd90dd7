use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "model": {"name": "burgers"},
  "grid": {"L": 20, "dx": 0.1},
  "experiment": {"templates": {"t_max": 20, "fit_from": 10}}
}
"#;

fn tpshock(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpshock"))
        .args(args)
        .current_dir(dir)
        .env_remove("TPSHOCK_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = tpshock(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn workspace(config: &str) -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.json"), config).unwrap();
    dir
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Data rows of a CSV artifact, skipping `#` lines and the header.
fn rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn csv_hash(path: &Path) -> String {
    let text = std::fs::read_to_string(path).unwrap();
    text.lines().next().unwrap().strip_prefix("# config_hash: ").expect("hash header").to_string()
}

#[test]
fn burgers_profile_has_unit_tail_rate_and_tanh_shape() {
    let dir = workspace(r#"{"model": {"name": "burgers"}}"#);
    ok(dir.path(), &["profile", "--config", "cfg.json"]);
    let meta = json(&dir.path().join("profile.meta.json"));
    let eta = meta["tail_rate"].as_f64().unwrap();
    assert!((eta - 1.0).abs() < 0.02, "tail rate {eta}");
    let rows = rows(&dir.path().join("profile.csv"));
    assert_eq!(rows.len(), 801);
    for r in &rows {
        assert_eq!(r[1], 0.0);
        assert!((r[2] + (r[0] / 2.0).tanh()).abs() < 5e-3, "x = {}: {}", r[0], r[2]);
    }
    assert!(dir.path().join("profile.provenance.json").exists());
}

#[test]
fn missing_model_is_rejected_with_line_anchor() {
    let dir = workspace("{\n  \"grid\": {\"L\": 20}\n}\n");
    let out = tpshock(dir.path(), &["profile", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cfg.json:3:1:"), "{err}");
    assert!(err.contains("model"), "{err}");
    assert!(!dir.path().join("profile.csv").exists());
}

#[test]
fn unknown_keys_are_rejected_at_their_line() {
    let dir = workspace("{\n  \"model\": {\"name\": \"burgers\"},\n  \"grid\": {\"L\": 20, \"dxx\": 0.1}\n}\n");
    let out = tpshock(dir.path(), &["profile", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cfg.json:3:"), "{err}");
    assert!(err.contains("dxx"), "{err}");
}

#[test]
fn semantic_errors_point_at_the_offending_key() {
    let dir = workspace("{\n  \"model\": {\n    \"name\": \"burgers\",\n    \"endstates\": {\"minus\": [1, 2]}\n  }\n}\n");
    let out = tpshock(dir.path(), &["profile", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cfg.json:4:5:"), "{err}");
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = tpshock(dir.path(), &["profile", "--config", "nope.json"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn non_lax_endstates_fail_numerically_with_stage_name() {
    let dir = workspace(r#"{"model": {"name": "burgers", "endstates": {"minus": [-1], "plus": [1]}}}"#);
    let out = tpshock(dir.path(), &["profile", "--config", "cfg.json"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("stage `characteristics`"), "{err}");
}

#[test]
fn oversized_perturbation_fails_in_the_perturbation_stage() {
    let dir = workspace(SMALL);
    let out = tpshock(dir.path(), &["decay", "--config", "cfg.json", "--amplitude", "10", "--tmax", "2"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("stage `perturbation`"));
}

#[test]
fn zero_threads_is_rejected_from_the_environment() {
    let dir = workspace(SMALL);
    let out = Command::new(env!("CARGO_BIN_EXE_tpshock"))
        .args(["profile", "--config", "cfg.json"])
        .current_dir(dir.path())
        .env("TPSHOCK_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn identical_configs_give_byte_identical_csv() {
    let dir = workspace(SMALL);
    let p = dir.path();
    ok(p, &["decay", "--config", "cfg.json", "--tmax", "10", "--threads", "1", "--out", "a/decay.csv"]);
    ok(p, &["decay", "--config", "cfg.json", "--tmax", "10", "--threads", "2", "--out", "b/decay.csv"]);
    ok(p, &["greens", "--config", "cfg.json", "--tmax", "2", "--out", "a/green.csv"]);
    ok(p, &["greens", "--config", "cfg.json", "--tmax", "2", "--out", "b/green.csv"]);
    for name in ["decay.csv", "green.csv", "decay.summary.json", "decay.provenance.json"] {
        let a = std::fs::read(p.join("a").join(name)).unwrap();
        let b = std::fs::read(p.join("b").join(name)).unwrap();
        assert!(a == b, "{name} differs between runs");
    }
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let dir = workspace(SMALL);
    let p = dir.path();
    ok(p, &["profile", "--config", "cfg.json", "--tmax", "1", "--out", "profile.csv"]);
    ok(p, &["decay", "--config", "cfg.json", "--tmax", "10", "--out", "decay.csv"]);
    ok(p, &["dichotomy", "--config", "cfg.json", "--out", "frame.json"]);
    for (csv, stem, extra) in [
        (Some("profile.csv"), "profile", Some("profile.meta.json")),
        (Some("decay.csv"), "decay", Some("decay.summary.json")),
        (None, "frame", Some("frame.json")),
    ] {
        let prov = json(&p.join(format!("{stem}.provenance.json")));
        let hash = prov["config_hash"].as_str().unwrap().to_string();
        assert_eq!(hash.len(), 64);
        if let Some(c) = csv {
            assert_eq!(csv_hash(&p.join(c)), hash);
        }
        if let Some(j) = extra {
            assert_eq!(json(&p.join(j))["config_hash"].as_str().unwrap(), hash);
        }
    }
}

#[test]
fn provenance_materializes_defaults_and_overrides() {
    let dir = workspace(SMALL);
    let p = dir.path();
    ok(p, &["decay", "--config", "cfg.json", "--tmax", "10", "--out", "a.csv"]);
    ok(p, &["decay", "--config", "cfg.json", "--tmax", "10", "--amplitude", "0.04", "--out", "b.csv"]);
    let a = json(&p.join("a.provenance.json"));
    let b = json(&p.join("b.provenance.json"));
    let cfg = &a["config"];
    assert_eq!(cfg["grid"]["dt"].as_f64().unwrap(), 0.4 * 0.1);
    assert_eq!(cfg["experiment"]["decay"]["t_max"].as_f64().unwrap(), 10.0);
    assert_eq!(cfg["experiment"]["decay"]["window"], serde_json::json!([1.0, 10.0]));
    assert_eq!(cfg["model"]["endstates"]["plus"], serde_json::json!([-1.0]));
    assert_eq!(cfg["tolerances"]["delta"].as_f64().unwrap(), 5.0);
    assert_eq!(b["config"]["experiment"]["decay"]["amplitude"].as_f64().unwrap(), 0.04);
    assert_ne!(a["config_hash"], b["config_hash"]);
    assert_eq!(a["versions"]["tpshock-core"].as_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn quadratic_model_resolves_partner_state() {
    let dir = workspace(r#"{"model": {"name": "quadratic2"}, "grid": {"L": 20, "dx": 0.1}}"#);
    ok(dir.path(), &["profile", "--config", "cfg.json"]);
    let meta = json(&dir.path().join("profile.meta.json"));
    let plus: Vec<f64> = serde_json::from_value(meta["endstates"]["plus"].clone()).unwrap();
    let minus: Vec<f64> = serde_json::from_value(meta["endstates"]["minus"].clone()).unwrap();
    let f = |u: &[f64]| [0.5 * u[0] * u[0] + 0.1 * u[1] * u[1], -u[1] + 0.1 * u[0] * u[1]];
    let (a, b) = (f(&minus), f(&plus));
    assert!((a[0] - b[0]).abs() < 1e-10 && (a[1] - b[1]).abs() < 1e-10);
    let rows = rows(&dir.path().join("profile.csv"));
    assert_eq!(rows[0].len(), 4);
}

#[test]
fn greens_column_carries_unit_mass() {
    let dir = workspace(SMALL);
    ok(dir.path(), &["greens", "--config", "cfg.json", "--y", "-2", "--tmax", "3", "--out", "g.csv"]);
    let rows = rows(&dir.path().join("g.csv"));
    let mut times: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    times.dedup();
    assert_eq!(times, vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0]);
    for t in times {
        let g: Vec<f64> = rows.iter().filter(|r| r[0] == t).map(|r| r[2]).collect();
        let m = 0.1 * (g.iter().sum::<f64>() - 0.5 * (g[0] + g[g.len() - 1]));
        assert!((m - 1.0).abs() < 1e-3, "mass {m} at t = {t}");
    }
}

#[test]
fn templates_fit_reports_constants_without_violations() {
    let dir = workspace(SMALL);
    ok(dir.path(), &["templates", "--config", "cfg.json", "--fit", "--out", "fit.json"]);
    let fit = json(&dir.path().join("fit.json"));
    let c = fit["C_min"].as_f64().unwrap();
    assert!(c.is_finite() && c > 0.0);
    assert_eq!(fit["violations"].as_u64(), Some(0));
    assert!(fit["M"].as_f64().unwrap() > 0.0 && fit["eta"].as_f64().unwrap() > 0.0);
}

#[test]
fn decay_series_match_summary() {
    let dir = workspace(SMALL);
    ok(dir.path(), &["decay", "--config", "cfg.json", "--tmax", "20", "--out", "d.csv"]);
    let text = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "t,q,tau,q_dot,L_1,L_2,L_inf,template_ratio");
    let rows = rows(&dir.path().join("d.csv"));
    assert_eq!(rows.last().unwrap()[0], 20.0);
    let summary = json(&dir.path().join("d.summary.json"));
    let mass = summary["mass"][0].as_f64().unwrap();
    let q_star = summary["q_star"].as_f64().unwrap();
    assert!((q_star - mass / 2.0).abs() < 0.05 * mass / 2.0, "q* {q_star} vs {}", mass / 2.0);
    let late = rows.last().unwrap();
    assert!(late[6] < rows[0][6], "sup norm did not decay");
}

#[test]
fn iterate_reports_requested_number_of_steps() {
    let dir = workspace(SMALL);
    ok(dir.path(), &["iterate", "--config", "cfg.json", "--n", "3", "--out", "iter.json"]);
    let it = json(&dir.path().join("iter.json"));
    let steps = it["iterations"].as_array().unwrap();
    assert_eq!(steps.len(), 3);
    for s in steps {
        assert!(s["residuals"]["duhamel"].as_f64().unwrap() < 0.02);
    }
    let last = steps[2]["residuals"]["fixed_point"].as_f64().unwrap();
    let first = steps[0]["residuals"]["fixed_point"].as_f64().unwrap();
    assert!(last < 1e-2 * first);
}

#[test]
fn spectrum_and_dichotomy_see_the_translation_mode() {
    let dir = workspace(SMALL);
    let p = dir.path();
    ok(p, &["spectrum", "--config", "cfg.json", "--out", "report.json"]);
    let r = json(&p.join("report.json"));
    assert_eq!(r["s1"], Value::Bool(true));
    assert_eq!(r["s3"], Value::Bool(true));
    assert_eq!(r["unit_cluster"].as_array().unwrap().len(), 1);
    ok(p, &["dichotomy", "--config", "cfg.json", "--sigma-re", "0", "--K", "2", "--circle-radius", "0.1", "--samples", "8"]);
    let f = json(&p.join("frame.json"));
    let angle = f["intersection"]["principal_angles"][0].as_f64().unwrap();
    assert!(angle < 1e-3, "angle {angle}");
    assert_eq!(f["circle"]["winding_number"].as_i64(), Some(1));
}

#[test]
fn acceptance_runs_a_single_criterion() {
    let dir = tempfile::tempdir().unwrap();
    let out = tpshock(dir.path(), &["acceptance", "--only", "2", "--out", "acc.json"]);
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().next().unwrap().starts_with("PASS [ 2]"), "{stdout}");
    let acc = json(&dir.path().join("acc.json"));
    assert_eq!(acc["criteria"][0]["passed"], Value::Bool(true));
    let bad = tpshock(dir.path(), &["acceptance", "--only", "12"]);
    assert_eq!(bad.status.code(), Some(2));
}
