use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pdmplab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdmplab")).args(args).env_remove("PDMPLAB_THREADS").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

const SCALING: &str = r#"{
  "sampler": "bps",
  "potential": {"type": "gaussian", "precision": [[1, 0], [0, 1]]},
  "eps_grid": [1e-2, 1e-3],
  "refresh": {"policy": "fixed", "rho": 1.0},
  "gamma": 0.1,
  "replicas": 30
}"#;

#[test]
fn qp_solve_prints_the_escape_example() {
    let o = pdmplab(&["qp-solve", "--H", "[[1,-0.3],[-0.3,1]]", "--c", "[1,1]"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("v* = (-1, -1)"), "{text}");
    assert!(text.contains("labels = clipped,clipped"), "{text}");
}

#[test]
fn qp_solve_rejects_indefinite_matrix() {
    let o = pdmplab(&["qp-solve", "--H", "[[1,2],[2,1]]", "--c", "[1,1]"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--H"));
}

#[test]
fn scaling_writes_reproducible_csvs() {
    let dir = TempDir::new().unwrap();
    let cfg = write(dir.path(), "bps_gauss.json", SCALING);
    let a = dir.path().join("a");
    let b = dir.path().join("nested/b");
    for out in [&a, &b] {
        let o = pdmplab(&["scaling", "--config", &cfg, "--seed", "42", "--out", out.to_str().unwrap(), "--quiet"]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    for name in ["scaling_runs.csv", "scaling_summary.csv"] {
        let x = fs::read(a.join(name)).unwrap();
        assert_eq!(x, fs::read(b.join(name)).unwrap(), "{name} differs between identical runs");
    }
    let summary = fs::read_to_string(a.join("scaling_summary.csv")).unwrap();
    assert!(summary.starts_with("epsilon,mean_jumps,se,slope,slope_ci_lo,slope_ci_hi\n"));
    assert_eq!(summary.lines().count(), 3);
    let runs = fs::read_to_string(a.join("scaling_runs.csv")).unwrap();
    assert!(runs.starts_with("epsilon,replica,jumps_bounce,jumps_refresh,jumps_flip,deriv_evals,hit,hit_time\n"));
    assert_eq!(runs.lines().count(), 61);

    // the echoed configuration reproduces the run without the seed flag
    let echo = a.join("config_echo.json");
    let c = dir.path().join("c");
    let o = pdmplab(&["scaling", "--config", echo.to_str().unwrap(), "--out", c.to_str().unwrap(), "--threads", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(a.join("scaling_runs.csv")).unwrap(), fs::read(c.join("scaling_runs.csv")).unwrap());
}

#[test]
fn missing_config_is_a_configuration_error() {
    let o = pdmplab(&["scaling", "--config", "missing.json"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.json"));
}

#[test]
fn invalid_fields_are_named() {
    let dir = TempDir::new().unwrap();
    let bad_gamma = write(dir.path(), "g.json", &SCALING.replace("\"gamma\": 0.1", "\"gamma\": -1"));
    let o = pdmplab(&["scaling", "--config", &bad_gamma, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));

    let unknown = write(dir.path(), "u.json", &SCALING.replace("\"replicas\"", "\"replicaz\""));
    let o = pdmplab(&["scaling", "--config", &unknown]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("replicaz"), "{}", stderr(&o));

    let grid = write(dir.path(), "e.json", &SCALING.replace("[1e-2, 1e-3]", "[1e-3, 1e-2]"));
    let o = pdmplab(&["scaling", "--config", &grid]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("eps_grid"), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_is_rejected() {
    let o = pdmplab(&["bogus"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn bad_thread_env_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_pdmplab"))
        .args(["qp-solve", "--H", "[[1]]", "--c", "[0.7]"])
        .env("PDMPLAB_THREADS", "many")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("PDMPLAB_THREADS"));
}

#[test]
fn zigzag_flow_exports_markers() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "zz.json",
        r#"{"flow": "zig_zag", "potential": {"type": "gaussian", "precision": [[0.4, 0.5], [0.5, 1]]},
            "x0": [-5, -10], "gamma": 0.01, "horizon": 100}"#,
    );
    let o = pdmplab(&["flow", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("flow.csv")).unwrap();
    assert!(csv.starts_with("t,x1,x2,v1,v2,marker\n"));
    let markers: Vec<&str> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).filter(|m| !m.is_empty()).collect();
    assert_eq!(
        markers,
        ["zz_boundary_hit_0;zz_direction_recompute", "zz_boundary_hit_1;zz_direction_recompute", "level_set_hit"]
    );
}

#[test]
fn simulate_exports_event_skeleton() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        r#"{"sampler": "zig_zag", "potential": {"type": "gaussian", "precision": [[1, 0.5], [0.5, 1]]},
            "eps": 0.001, "gamma": 0.1, "horizon": 50, "seed": 3}"#,
    );
    let o = pdmplab(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "t,x1,x2,v1,v2,marker");
    assert!(lines[1].ends_with(",start"));
    assert!(lines.last().unwrap().ends_with(",level_set_hit"));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("run_summary.json")).unwrap()).unwrap();
    assert_eq!(summary["hit"], true);
}

#[test]
fn simulate_inside_level_set_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(
        dir.path(),
        "sim.json",
        r#"{"sampler": "bps", "potential": {"type": "gaussian", "precision": [[1, 0], [0, 1]]},
            "eps": 0.01, "gamma": 0.1, "x0": [0.1, 0.1]}"#,
    );
    let o = pdmplab(&["simulate", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn drift_gap_and_balance_studies_run() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().to_str().unwrap();
    let drift = write(
        dir.path(),
        "drift.json",
        r#"{"sampler": "fec", "potential": {"type": "gaussian", "precision": [[1, 0], [0, 1]]},
            "eps": 0.01, "points": 5, "replicas": 200}"#,
    );
    let o = pdmplab(&["drift", "--config", &drift, "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("drift_points.csv")).unwrap().lines().count(), 6);

    let gap = write(dir.path(), "gap.json", &SCALING.replace("\"replicas\": 30", "\"replicas\": 4, \"horizon\": 2"));
    let o = pdmplab(&["trajectory-gap", "--config", &gap, "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("gap_summary.csv")).unwrap().lines().count(), 3);

    let balance = write(
        dir.path(),
        "balance.json",
        &format!(r#"{{"experiment": {}, "rho_grid": [1, 10]}}"#, SCALING.replace("\"replicas\": 30", "\"replicas\": 5")),
    );
    let o = pdmplab(&["refresh-balance", "--config", &balance, "--out", out, "--quiet"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("refresh_balance.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert_eq!(csv.lines().skip(1).filter(|l| l.ends_with(",true")).count(), 1);
}
