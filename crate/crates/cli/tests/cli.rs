//! End-to-end checks of the command-line surface: exit codes, artifact
//! layout, validation messages, and reproducibility.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn svb() -> Command {
    Command::new(env!("CARGO_BIN_EXE_svb"))
}

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .canonicalize()
        .expect("bundled scenarios directory")
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("svb-cli-{tag}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn run(kind: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    svb()
        .arg(kind)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .arg("--quiet")
        .args(extra)
        .output()
        .expect("spawn svb")
}

#[test]
fn reeb_scenario_produces_trajectory_and_passes() {
    let out = temp_dir("reeb");
    let output = run("flow", &scenarios_dir().join("reeb.toml"), &out, &[]);
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let csv = std::fs::read_to_string(out.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "t,y1,wp1,eps");
    assert_eq!(csv.lines().count(), 1002);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["assertions"]
        .as_array()
        .unwrap()
        .iter()
        .all(|a| a["passed"].as_bool().unwrap()));
    // eps drift at machine zero for the linear-flux family
    assert!(report["metrics"]["eps_drift"].as_f64().unwrap() <= 1e-12);
}

#[test]
fn unknown_config_key_is_named_with_exit_2() {
    let out = temp_dir("badkey");
    let config = out.join("bad.toml");
    std::fs::write(&config, "name = \"x\"\nkind = \"flow\"\nmystery = 1\n").unwrap();
    let output = run("flow", &config, &out, &[]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("mystery"), "stderr: {stderr}");
}

#[test]
fn kind_mismatch_is_rejected() {
    let out = temp_dir("mismatch");
    let output = run("kinetic", &scenarios_dir().join("reeb.toml"), &out, &[]);
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("flow"), "stderr: {stderr}");
}

#[test]
fn missing_config_is_a_validation_error() {
    let out = temp_dir("missing");
    let output = run("flow", &out.join("nope.toml"), &out, &[]);
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn failed_assertion_exits_3_and_still_reports() {
    let out = temp_dir("assert");
    let config = out.join("impossible.toml");
    std::fs::write(
        &config,
        r#"
name = "impossible"
kind = "flow"

[flow]
hamiltonian = { family = "constant_velocity", c = [1.0] }
y0 = [0.0]
wp0 = [1.0]
step = 0.01
steps = 10

[assertions]
final_y = { value = 5.0, abs_tol = 1e-9 }
"#,
    )
    .unwrap();
    let output = run("flow", &config, &out, &[]);
    assert_eq!(output.status.code(), Some(3));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["assertions"][0]["passed"], serde_json::json!(false));
}

#[test]
fn divergent_flow_exits_4_with_partial_artifacts() {
    let out = temp_dir("diverge");
    let config = out.join("explode.toml");
    std::fs::write(
        &config,
        r#"
name = "explode"
kind = "flow"

[flow]
hamiltonian = { family = "reeb", k = 2000.0, offset = 1.0 }
y0 = [1.0]
wp0 = [1.0]
step = 1e-3
steps = 1000
"#,
    )
    .unwrap();
    let output = run("flow", &config, &out, &[]);
    assert_eq!(output.status.code(), Some(4));
    // the truncated trajectory and the report are still written
    assert!(out.join("trajectory.csv").exists());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!(report["failure"].as_str().unwrap().contains("diverged"));
}

#[test]
fn cfl_violation_is_a_validation_error_with_suggestion() {
    let out = temp_dir("cfl");
    let config = out.join("cfl.toml");
    std::fs::write(
        &config,
        r#"
name = "cfl"
kind = "kinetic"

[kinetic]
coefficients = [{ axes = [1, 1], value = 1.0 }]
t_final = 1.0
dt = 10.0

[kinetic.grid]
extents = [[0.0, 1.0]]
points = [101]
bc = "periodic"

[kinetic.initial]
profile = "uniform"
"#,
    )
    .unwrap();
    // requesting dt above the bound is clamped, not fatal; the run passes
    let output = run("kinetic", &config, &out, &[]);
    assert!(output.status.success());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let dt = report["metrics"]["dt"].as_f64().unwrap();
    let bound = report["payload"]["stable_dt"].as_f64().unwrap();
    assert!(dt <= bound);
}

#[test]
fn list_orders_scenarios_lexicographically() {
    let output = svb().arg("list").arg(scenarios_dir()).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    let names: Vec<&str> = stdout
        .lines()
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert!(names.len() >= 12, "found {names:?}");
    let mut sorted = names.clone();
    sorted.sort();
    assert_eq!(names, sorted);
    // one of every kind
    for kind in [
        "flow",
        "kinetic",
        "stationary",
        "estimate",
        "holonomy",
        "action",
        "invariants",
    ] {
        assert!(
            stdout
                .lines()
                .any(|l| l.split_whitespace().nth(1) == Some(kind)),
            "missing {kind}"
        );
    }

    // empty directory: empty list
    let empty = temp_dir("empty");
    let output = svb().arg("list").arg(&empty).output().unwrap();
    assert!(output.status.success());
    assert!(output.stdout.is_empty());

    // unreadable directory: error
    let output = svb()
        .arg("list")
        .arg(empty.join("absent"))
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn out_dir_env_override_is_honored() {
    let base = temp_dir("envout");
    let output = svb()
        .arg("holonomy")
        .arg("--config")
        .arg(scenarios_dir().join("holonomy_exact.toml"))
        .arg("--quiet")
        .env("SVB_OUT_DIR", &base)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(base.join("holonomy_exact").join("report.json").exists());
}

#[test]
fn seed_override_changes_sampled_estimates() {
    let out_a = temp_dir("seed-a");
    let out_b = temp_dir("seed-b");
    let config = scenarios_dir().join("brownian.toml");
    let a = run("estimate", &config, &out_a, &["--seed", "100"]);
    let b = run("estimate", &config, &out_b, &["--seed", "200"]);
    assert!(a.status.success() && b.status.success());
    let read = |p: &Path| -> f64 {
        let report: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p.join("report.json")).unwrap()).unwrap();
        report["metrics"]["D[(1,1)]"].as_f64().unwrap()
    };
    assert!(read(&out_a) != read(&out_b));
}

#[test]
fn repeated_runs_are_byte_identical() {
    let out_a = temp_dir("det-a");
    let out_b = temp_dir("det-b");
    let config = scenarios_dir().join("reeb.toml");
    assert!(run("flow", &config, &out_a, &[]).status.success());
    assert!(run("flow", &config, &out_b, &[]).status.success());
    let csv_a = std::fs::read(out_a.join("trajectory.csv")).unwrap();
    let csv_b = std::fs::read(out_b.join("trajectory.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    // reports agree once the wall-time line is normalized
    let normalize = |p: &Path| -> String {
        std::fs::read_to_string(p.join("report.json"))
            .unwrap()
            .lines()
            .filter(|l| !l.contains("wall_time_s"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(normalize(&out_a), normalize(&out_b));
}
