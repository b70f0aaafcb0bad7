//! Black-box tests of the command-line interface: exit codes, output
//! shape, determinism.

use std::io::Write;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_progeny"))
}

fn write_temp(content: &str) -> tempfile::NamedTempFile {
    let mut f = tempfile::NamedTempFile::new().unwrap();
    f.write_all(content.as_bytes()).unwrap();
    f
}

fn poisson1_json() -> &'static str {
    r#"{"root": [1.0], "offspring": [{"kind": "poisson_product", "mu": [0.8]}]}"#
}

fn table2_json() -> &'static str {
    r#"{
        "root": [0.4, 0.6],
        "offspring": [
            {"kind": "table", "entries": [
                {"x": [0, 0], "p": 0.5}, {"x": [1, 0], "p": 0.2},
                {"x": [0, 1], "p": 0.2}, {"x": [1, 1], "p": 0.1}
            ]},
            {"kind": "table", "entries": [
                {"x": [0, 0], "p": 0.6}, {"x": [0, 1], "p": 0.25},
                {"x": [2, 0], "p": 0.15}
            ]}
        ]
    }"#
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Drops manifest comment lines, whose wall-time field varies run to run.
fn without_manifest(text: &str) -> String {
    text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n")
}

#[test]
fn validate_ok_exit_zero() {
    let f = write_temp(poisson1_json());
    let out = bin().args(["validate"]).arg(f.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("status: ok"));
    assert!(text.contains("Subcritical"));
}

#[test]
fn validate_bad_model_exit_two() {
    // root does not sum to one
    let f = write_temp(r#"{"root": [0.5], "offspring": [{"kind": "poisson_product", "mu": [0.5]}]}"#);
    let out = bin().args(["validate"]).arg(f.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("violation"));
}

#[test]
fn malformed_json_exit_one_with_usage() {
    let f = write_temp("{not json");
    let out = bin().args(["validate"]).arg(f.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    // usage text lands on one of the streams
    let combined = format!("{}{}", stdout(&out), String::from_utf8_lossy(&out.stderr));
    assert!(combined.contains("Usage") || combined.contains("usage"));
}

#[test]
fn unknown_flag_exit_one() {
    let out = bin().args(["validate", "--frobnicate", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("usage") ||
            String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn exact_oracle_all_small_diff() {
    let f = write_temp(table2_json());
    let out = bin()
        .args(["exact"])
        .arg(f.path())
        .args(["--nmax", "8", "--oracle", "all"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let report_line = text
        .lines()
        .find(|l| l.starts_with("# oracle_report "))
        .expect("oracle report present");
    let v: serde_json::Value =
        serde_json::from_str(report_line.trim_start_matches("# oracle_report ")).unwrap();
    let max = v["max"].as_f64().unwrap();
    assert!(max < 1e-9, "max oracle diff {max}");
}

#[test]
fn gamma_boundary_rho_exit_two() {
    let f = write_temp(table2_json());
    let out = bin()
        .args(["gamma"])
        .arg(f.path())
        .args(["--rho", "1.0,0.0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("interior"));
}

#[test]
fn converge_matches_gamma_column() {
    let f = write_temp(poisson1_json());
    let conv = bin()
        .args(["converge"])
        .arg(f.path())
        .args(["--rho", "1.0", "--nmax", "10"])
        .output()
        .unwrap();
    assert_eq!(conv.status.code(), Some(0));
    let text = stdout(&conv);
    let neg_gamma: f64 = text
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(2)
        .unwrap()
        .parse()
        .unwrap();

    let gam = bin()
        .args(["gamma"])
        .arg(f.path())
        .args(["--rho", "1.0"])
        .output()
        .unwrap();
    let gamma_val: f64 = stdout(&gam)
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(neg_gamma, -gamma_val, "same code path must agree exactly");
}

#[test]
fn outputs_reproducible_modulo_manifest() {
    let f = write_temp(table2_json());
    let run = || {
        let out = bin()
            .args(["simulate"])
            .arg(f.path())
            .args(["--samples", "50", "--seed", "9", "--tilt", "auto"])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0));
        stdout(&out)
    };
    let a = run();
    let b = run();
    assert_eq!(without_manifest(&a), without_manifest(&b));
    assert!(a.lines().next().unwrap().starts_with("# {"));
}

#[test]
fn simulate_tilt_list_and_summary() {
    let f = write_temp(poisson1_json());
    let out = bin()
        .args(["simulate"])
        .arg(f.path())
        .args(["--samples", "100", "--seed", "4", "--tilt", "0.1"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l.starts_with("# summary ")));
    assert!(text.lines().any(|l| l == "replicate,root_type,censored,log_weight,total_1"));
}

#[test]
fn rhostar_json_report() {
    let f = write_temp(
        r#"{"root": [0.5, 0.5], "offspring": [
            {"kind": "poisson_product", "mu": [0.7, 0.3]},
            {"kind": "poisson_product", "mu": [0.6, 0.4]}
        ]}"#,
    );
    let out = bin()
        .args(["rhostar"])
        .arg(f.path())
        .args(["--check-eigenvector"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!((v["rho"][0].as_f64().unwrap() - 2.0 / 3.0).abs() < 1e-6);
    assert!(v["eigenvector_check"]["irreducible"].as_bool().unwrap());
    assert!(v["eigenvector_check"]["max_abs_diff"].as_f64().unwrap() < 1e-6);
}

#[test]
fn graphdemo_runs_and_summarizes() {
    let f = write_temp(
        r#"{"n": 2000, "q": [0.5, 0.5],
            "kappa": [[1.0, 0.8], [0.8, 0.9]], "seed": 5}"#,
    );
    let out = bin().args(["graphdemo"]).arg(f.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.lines().any(|l| l == "component_id,size,count_1,count_2"));
    let summary = text
        .lines()
        .find(|l| l.starts_with("# summary "))
        .expect("summary line");
    let v: serde_json::Value =
        serde_json::from_str(summary.trim_start_matches("# summary ")).unwrap();
    assert_eq!(v["giant"], false);
    assert!(v["small_component_counts"].as_array().unwrap().len() > 5);
}

#[test]
fn exact_underflow_exit_three() {
    // deeply subcritical: coefficients cross the subnormal range fast
    let f = write_temp(
        r#"{"root": [1.0], "offspring": [{"kind": "table", "entries": [
            {"x": [0], "p": 0.999999}, {"x": [2], "p": 0.000001}
        ]}]}"#,
    );
    let out = bin()
        .args(["exact"])
        .arg(f.path())
        .args(["--nmax", "120"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}
