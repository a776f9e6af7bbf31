//! End-to-end tests of the command-line interface: exit codes, JSON error
//! schema, output determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_volterra1k"))
}

fn write_problem(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const P1: &str = r#"{
  "m": 1, "n": 2, "T": 1.0,
  "alphas": ["t/2"],
  "kernels": [[["2"]], [["1"]]],
  "f": ["3*t/2"]
}"#;

const P2: &str = r#"{
  "m": 1, "n": 2, "T": 1.0,
  "alphas": ["t/2"],
  "kernels": [[["1"]], [["-1"]]],
  "f": ["t"]
}"#;

fn assert_error_json(out: &Output) {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().unwrap_or("");
    let v: serde_json::Value =
        serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {stderr}"));
    assert!(v["error"]["code"].is_string(), "missing error.code: {v}");
    assert!(
        v["error"]["message"].is_string(),
        "missing error.message: {v}"
    );
}

#[test]
fn solve_p1_writes_constant_solution() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p1.json", P1);
    let out = bin()
        .args(["solve"])
        .arg(&problem)
        .args(["--grid", "256", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    let csv = fs::read_to_string(dir.path().join("p1.csv")).unwrap();
    for line in csv.lines().skip(1).step_by(40) {
        let x: f64 = line.split(',').nth(1).unwrap().parse().unwrap();
        assert!((x - 1.0).abs() < 1e-8, "{line}");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("p1.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["condition_a"]["holds"], true);
    assert!(report["residual_first_kind"].as_f64().unwrap() < 1e-8);
    assert!(dir.path().join("p1.plt").exists());
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p1.json", P1);
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    for out in [&out_a, &out_b] {
        let st = bin()
            .args(["solve"])
            .arg(&problem)
            .args(["--grid", "128", "--out"])
            .arg(out)
            .status()
            .unwrap();
        assert!(st.success());
    }
    for name in ["p1.csv", "p1.report.json", "p1.plt"] {
        let a = fs::read(out_a.join(name)).unwrap();
        let b = fs::read(out_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn analyze_p2_reports_failed_condition_and_singular_point() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p2.json", P2);
    let out = bin()
        .args(["analyze"])
        .arg(&problem)
        .args(["--N", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("p2.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["condition_a"]["holds"], false);
    let p0 = &report["characteristic"]["points"][0];
    assert_eq!(p0["kind"], "singular");
    assert_eq!(p0["index"], 1);
    assert_eq!(report["characteristic"]["points"][1]["kind"], "regular");
    assert_eq!(report["n_star"]["n_star"], 1);
}

#[test]
fn refine_p2_matches_log_family() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p2.json", P2);
    let out = bin()
        .args(["refine"])
        .arg(&problem)
        .args(["--set", "c1=0", "--N", "3", "--grid", "256", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("p2.csv")).unwrap();
    assert!(csv.starts_with("# c1=0\n"), "assignment echoed in header");
    let ln2 = std::f64::consts::LN_2;
    for line in csv.lines().skip(2).step_by(30) {
        let mut it = line.split(',');
        let t: f64 = it.next().unwrap().parse().unwrap();
        let x: f64 = it.next().unwrap().parse().unwrap();
        assert!((x - (-t.ln() / ln2)).abs() < 1e-6, "t={t} x={x}");
    }
}

#[test]
fn refine_multiple_assignments() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p2.json", P2);
    let out = bin()
        .args(["refine"])
        .arg(&problem)
        .args([
            "--set", "c1=0", "--set", "c1=3", "--N", "2", "--grid", "128", "--out",
        ])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let a = fs::read_to_string(dir.path().join("p2.set1.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("p2.set2.csv")).unwrap();
    let parse = |text: &str| -> Vec<f64> {
        text.lines()
            .filter(|l| !l.starts_with('#') && !l.starts_with('t'))
            .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
            .collect()
    };
    let (xa, xb) = (parse(&a), parse(&b));
    assert_eq!(xa.len(), xb.len());
    for (va, vb) in xa.iter().zip(&xb) {
        assert!(
            (vb - va - 3.0).abs() < 1e-8,
            "family members differ by the constant"
        );
    }
}

#[test]
fn asympt_emits_expansion_and_decay() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p2.json", P2);
    let out = bin()
        .args(["asympt"])
        .arg(&problem)
        .args(["--N", "3", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("c1"),
        "pretty form names the parameter: {stdout}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("p2.report.json")).unwrap())
            .unwrap();
    assert_eq!(report["expansion"]["params"].as_array().unwrap().len(), 1);
}

#[test]
fn verify_checks_a_written_solution() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p1.json", P1);
    let st = bin()
        .args(["solve"])
        .arg(&problem)
        .args(["--grid", "128", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert!(st.success());
    let out = bin()
        .args(["verify"])
        .arg(&problem)
        .arg(dir.path().join("p1.csv"))
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(dir.path().join("p1.verify.report.json")).unwrap(),
    )
    .unwrap();
    assert!(report["max_residual_first_kind"].as_f64().unwrap() < 1e-8);
}

#[test]
fn missing_file_is_usage_error_with_json() {
    let out = bin()
        .args(["solve", "/nonexistent/problem.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_error_json(&out);
}

#[test]
fn invalid_problem_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    // f(0) != 0 violates the hypotheses
    let problem = write_problem(
        dir.path(),
        "bad.json",
        r#"{"m":1,"n":2,"T":1.0,"alphas":["t/2"],"kernels":[[["2"]],[["1"]]],"f":["3*t/2 + 1"]}"#,
    );
    let out = bin()
        .args(["solve"])
        .arg(&problem)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert_error_json(&out);
}

#[test]
fn noncontractive_solve_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p2.json", P2);
    let out = bin()
        .args(["solve"])
        .arg(&problem)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert_error_json(&out);
}

#[test]
fn bad_flag_is_usage_error_with_json() {
    let out = bin()
        .args(["solve", "x.json", "--grid", "abc"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_error_json(&out);
}

#[test]
fn unknown_parameter_in_set_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let problem = write_problem(dir.path(), "p2.json", P2);
    let out = bin()
        .args(["refine"])
        .arg(&problem)
        .args(["--set", "zz=1", "--N", "2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_error_json(&out);
}
