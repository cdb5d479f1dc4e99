use std::fs;
use std::path::Path;
use std::process::Command;

use clap::Parser;
use impham_cli::{run, Cli, EXIT_CONFIG, EXIT_HYPOTHESES, EXIT_NOT_CONVERGED, EXIT_OK};

fn exec(args: &[&str]) -> i32 {
    let mut full = vec!["impham"];
    full.extend_from_slice(args);
    run(Cli::parse_from(full))
}

fn read(dir: &Path, name: &str) -> Vec<u8> {
    fs::read(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_slice(&read(dir, name)).unwrap()
}

#[test]
fn simulate_writes_artifacts_deterministically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = dir.path().to_str().unwrap();
        assert_eq!(exec(&["simulate", "--config", "example-4.1", "--orbits", "1000", "--out", out]), EXIT_OK);
    }
    for name in ["orbits.csv", "paths.csv", "B.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
    let b_json = json(a.path(), "B.json");
    let mean = b_json["mc_mean"].as_f64().unwrap();
    let se = b_json["mc_stderr"].as_f64().unwrap();
    assert!((mean - 4.0 / 49.0).abs() < 4.0 * se, "{mean} ± {se}");
    assert_eq!(b_json["analytic_bound"].as_f64().unwrap(), 4.0 / 9.0);
    let header = String::from_utf8(read(a.path(), "paths.csv")).unwrap();
    assert!(header.starts_with("orbit_id,segment,t,side,u_0,u_1\n"));
}

#[test]
fn zero_orbits_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(exec(&["simulate", "--orbits", "0", "--out", out]), EXIT_CONFIG);
    assert_eq!(exec(&["simulate", "--config", "no-such-scenario", "--out", out]), EXIT_CONFIG);
}

#[test]
fn hypothesis_gate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(exec(&["hypotheses", "--config", "example-4.1", "--out", out]), EXIT_OK);
    let h = json(dir.path(), "hypotheses.json");
    let c = h["condition_value"].as_f64().unwrap();
    assert!((c - 0.0871).abs() < 1e-3, "{c}");
    assert_eq!(h["B_bound_source"], "analytic");
    assert_eq!(exec(&["hypotheses", "--config", "example-4.1-x10", "--out", out]), EXIT_HYPOTHESES);
    // q = 2 leaves no room in the size condition
    assert_eq!(exec(&["hypotheses", "--config", "quadratic", "--out", out]), EXIT_HYPOTHESES);
}

#[test]
fn solve_quadratic_succeeds() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(exec(&["solve", "--config", "quadratic", "--out", out]), EXIT_OK);
    let r = json(dir.path(), "residuals.json");
    for key in ["ode_residual_sup", "jump_residual_max", "boundary_residual"] {
        assert!(r[key].as_f64().unwrap() < 1e-4, "{key}");
    }
    assert_eq!(exec(&["verify", "--config", "quadratic", "--out", out]), EXIT_OK);
}

#[test]
fn solve_report_verify_on_the_fixed_orbit() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    // converges, but the recovered process misses the jump and boundary
    // conditions by a per-segment constant
    assert_eq!(exec(&["solve", "--config", "example-4.1-fixed", "--out", out]), EXIT_NOT_CONVERGED);
    let result = json(dir.path(), "result.json");
    assert_eq!(result["converged"], true);
    assert!(result["chi_at_vstar"].as_f64().unwrap() > 0.0);
    let residuals = read(dir.path(), "residuals.json");

    assert_eq!(exec(&["verify", "--config", "example-4.1-fixed", "--out", out]), EXIT_NOT_CONVERGED);
    assert_eq!(read(dir.path(), "residuals.json"), residuals);
    let jumps = String::from_utf8(read(dir.path(), "jump_residuals.csv")).unwrap();
    assert_eq!(jumps.lines().count(), 4);
    assert!(jumps.starts_with("orbit_id,j,xi,residual\n0,1,2.5000000000000000e-1,"));

    assert_eq!(exec(&["report", "--out", out]), EXIT_OK);
    let summary = json(dir.path(), "summary.json");
    assert!(summary["geometry"]["rho"].as_f64().unwrap() > 1.0);
    assert!(summary["solve"]["gradient_norm"].as_f64().unwrap() < 1e-6);
    let first: Vec<Vec<u8>> = ["summary.json", "chi_iteration.dat", "orbit_paths.dat", "rim.dat"]
        .iter()
        .map(|n| read(dir.path(), n))
        .collect();
    assert_eq!(exec(&["report", "--out", out]), EXIT_OK);
    for (n, bytes) in ["summary.json", "chi_iteration.dat", "orbit_paths.dat", "rim.dat"].iter().zip(first) {
        assert_eq!(read(dir.path(), n), bytes, "{n}");
    }
}

#[test]
fn force_runs_despite_failing_hypotheses() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let cfg = dir.path().join("x10.json");
    let mut c = impham::scenario::builtin("example-4.1-x10").unwrap();
    c.ensemble.n_orbits = 1;
    c.hypotheses.b_orbits = 1000;
    c.optimizer.max_iter = 40;
    fs::write(&cfg, c.to_json()).unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(exec(&["solve", "--config", cfg, "--out", out]), EXIT_HYPOTHESES);
    assert!(!dir.path().join("result.json").exists());
    let code = exec(&["solve", "--config", cfg, "--out", out, "--force"]);
    assert_ne!(code, EXIT_HYPOTHESES);
    let result = json(dir.path(), "result.json");
    assert_eq!(result["preconditions_passed"], false);
    assert_eq!(result["forced"], true);
}

#[test]
fn report_on_empty_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exec(&["report", "--out", dir.path().to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn verify_without_solution_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(exec(&["verify", "--config", "quadratic", "--out", dir.path().to_str().unwrap()]), EXIT_CONFIG);
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    let mut v: serde_json::Value =
        serde_json::from_str(&impham::scenario::builtin("quadratic").unwrap().to_json()).unwrap();
    v["grid"]["extra"] = serde_json::json!(true);
    fs::write(&cfg, v.to_string()).unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(exec(&["hypotheses", "--config", cfg.to_str().unwrap(), "--out", out]), EXIT_CONFIG);
}

#[test]
fn binary_outputs_match_across_thread_counts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let status = Command::new(env!("CARGO_BIN_EXE_impham"))
            .args(["solve", "--config", "quadratic-impulsive", "--orbits", "2", "--threads", threads, "--out"])
            .arg(dir.path())
            .status()
            .unwrap();
        assert_eq!(status.code(), Some(EXIT_NOT_CONVERGED));
    }
    for name in ["convergence.csv", "solution.csv", "residuals.json", "result.json", "geometry.json"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name}");
    }
}
