//! End-to-end checks of the installed binary: exit codes, file outputs and
//! byte-level determinism.

use std::path::PathBuf;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_polydich"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("polydich_cli_{tag}_{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn spectrum_writes_report_and_resolvent_csv() {
    let dir = temp_dir("spectrum");
    let out = bin()
        .args([
            "spectrum",
            "--builtin",
            "example_4_3",
            "--window",
            "256",
            "--grid-step",
            "5e-3",
            "--format",
            "both",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["command"], "spectrum");
    let intervals = report["stages"]["spectrum"]["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 2);
    let csv = std::fs::read_to_string(dir.join("resolvent.csv")).unwrap();
    assert!(csv.starts_with("tau,verdict,lambda_fit,K_fit\n"));
    assert!(csv.lines().count() > 100);
    // Rejected rows appear exactly near the spectrum points.
    for line in csv.lines().skip(1).filter(|l| l.contains(",rejected,")) {
        let tau: f64 = line.split(',').next().unwrap().parse().unwrap();
        assert!(
            (tau.abs() - 1.0).abs() < 0.02,
            "rejected grid point far from the spectrum: {tau}"
        );
    }
}

#[test]
fn identical_runs_are_byte_identical() {
    let d1 = temp_dir("det1");
    let d2 = temp_dir("det2");
    for dir in [&d1, &d2] {
        let out = bin()
            .args([
                "spectrum",
                "--builtin",
                "example_4_3",
                "--window",
                "256",
                "--grid-step",
                "5e-3",
                "--seed",
                "7",
                "--format",
                "csv",
                "--out",
            ])
            .arg(dir)
            .output()
            .unwrap();
        assert!(out.status.success());
    }
    let a = std::fs::read(d1.join("resolvent.csv")).unwrap();
    let b = std::fs::read(d2.join("resolvent.csv")).unwrap();
    assert_eq!(a, b, "resolvent CSVs differ between identical runs");
}

#[test]
fn malformed_system_json_exits_2_with_position() {
    let dir = temp_dir("bad");
    let path = dir.join("bad.json");
    std::fs::write(&path, "{ \"name\": \"x\",\n  broken").unwrap();
    let out = bin()
        .args(["spectrum", "--system"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "stderr should carry line/column: {err}");
}

#[test]
fn out_of_range_parameter_exits_2() {
    let out = bin()
        .args([
            "spectrum",
            "--builtin",
            "example_4_3",
            "--grid-step",
            "0.5",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn closed_form_system_from_disk() {
    let dir = temp_dir("table");
    let path = dir.join("system.json");
    std::fs::write(
        &path,
        r#"{ "name": "scalar", "d": 1, "origin": 1, "kind": "closed_form",
             "expr": [["((n+1)/n)^0.8"]] }"#,
    )
    .unwrap();
    let out = bin()
        .args(["spectrum", "--system"])
        .arg(&path)
        .args(["--window", "256", "--grid-step", "5e-3"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value =
        serde_json::from_slice(&out.stdout).unwrap();
    let intervals = report["stages"]["spectrum"]["intervals"].as_array().unwrap();
    assert_eq!(intervals.len(), 1);
    let center = 0.5 * (intervals[0]["lo"].as_f64().unwrap() + intervals[0]["hi"].as_f64().unwrap());
    assert!((center - 0.8).abs() < 5e-3, "center {center}");
}

#[test]
fn dichotomy_emits_norm_and_ratio_tables() {
    let dir = temp_dir("dich");
    let out = bin()
        .args([
            "dichotomy",
            "--builtin",
            "example_4_3",
            "--window",
            "256",
            "--horizon",
            "256",
            "--format",
            "both",
            "--out",
        ])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let norms = std::fs::read_to_string(dir.join("norms.csv")).unwrap();
    assert!(norms.starts_with("n,C_n\n"));
    let ratios = std::fs::read_to_string(dir.join("pair_ratios.csv")).unwrap();
    assert!(ratios.starts_with("m,n,ratio_stable,ratio_unstable,ratio_growth_fwd,ratio_growth_bwd\n"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["stages"]["polynomial"]["verdict"], "accepted");
    assert_eq!(report["stages"]["dyadic_equivalence"]["verdicts_agree"], true);
}

#[test]
fn linearize_zero_perturbation_residuals_are_zero() {
    let dir = temp_dir("linz");
    let pert = dir.join("zero.json");
    std::fs::write(&pert, r#"{ "kind": "closed_form", "expr": ["0", "0"], "c": 0.0 }"#).unwrap();
    let out = bin()
        .args([
            "linearize",
            "--builtin",
            "example_4_3",
            "--window",
            "256",
            "--grid-step",
            "5e-3",
            "--perturbation",
        ])
        .arg(&pert)
        .args(["--format", "both", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.join("residuals.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let mut parts = line.split(',');
        let _k = parts.next().unwrap();
        let step: f64 = parts.next().unwrap().parse().unwrap();
        let orbit: f64 = parts.next().unwrap().parse().unwrap();
        assert!(step < 1e-10 && orbit < 1e-10, "nonzero residual row: {line}");
    }
}

#[test]
fn demo_passes_its_fixtures() {
    let out = bin()
        .args(["demo", "--window", "1024", "--grid-step", "2e-3"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "demo exited {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["stages"]["example_4_3"]["spectrum"]["intervals"].is_array());
    assert!(report["stages"]["continuous_5_3"]["solution_mapping"].is_object());
    assert!(report["stages"].get("fixture_mismatch").is_none());
}
