use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn snls(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_snls"))
        .args(args)
        .arg("--out")
        .arg(out)
        .arg("--threads")
        .arg("1")
        .output()
        .unwrap()
}

fn run_dir(o: &Output) -> PathBuf {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap().trim().into()
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn skeleton_writes_trajectory_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&snls(tmp.path(), &["skeleton", "--set", "grid.n=64", "--set", "solver.horizon=0.1"]));
    let name = dir.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.contains("-skeleton-"), "{name}");
    let csv = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,norm_h,norm_lr"));
    assert_eq!(csv.lines().count(), 102);
    let m = manifest(&dir);
    assert_eq!(m["status"], "ok");
    assert_eq!(m["subcommand"], "skeleton");
    assert_eq!(m["config"]["grid"]["n"], 64);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 12);
    assert!(m["artifacts"].as_array().unwrap().iter().any(|a| a == "summary.json"));
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary["max_relative_mass_drift"].as_f64().unwrap() < 1e-10);
}

#[test]
fn same_config_gets_distinct_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let args = ["skeleton", "--set", "grid.n=64", "--set", "solver.horizon=0.01"];
    let a = run_dir(&snls(tmp.path(), &args));
    let b = run_dir(&snls(tmp.path(), &args));
    assert_ne!(a, b);
}

#[test]
fn invalid_parameters_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let o = snls(tmp.path(), &["skeleton", "--set", "model.alpha=6"]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("model.alpha"), "{err}");
    let o = snls(tmp.path(), &["skeleton", "--set", "model.colour=1"]);
    assert_eq!(o.status.code(), Some(2));
    let o = snls(tmp.path(), &["sweep", "--seed", "18446744073709551615"]);
    assert_eq!(o.status.code(), Some(2));
    let o = snls(tmp.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(std::fs::read_dir(tmp.path()).map(|d| d.count()).unwrap_or(0), 0);
}

#[test]
fn dry_run_prints_resolved_config() {
    let tmp = tempfile::tempdir().unwrap();
    let o = snls(tmp.path(), &["rate", "--dry-run", "--set", "model.beta=0.25"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let cfg = snls::RunConfig::from_toml_str(&text).unwrap();
    assert_eq!(cfg.model.beta, 0.25);
    assert!(!tmp.path().exists() || std::fs::read_dir(tmp.path()).unwrap().count() == 0);
}

#[test]
fn sweep_marks_censored_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&snls(
        tmp.path(),
        &[
            "sweep",
            "--set",
            "grid.n=32",
            "--set",
            "solver.horizon=0.05",
            "--set",
            "solver.dt=0.01",
            "--set",
            "event.radius=50.0",
            "--set",
            "sweep.epsilons=[0.1, 0.01]",
            "--set",
            "sweep.n_paths=20",
        ],
    ));
    let csv = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epsilon,n_paths,hits,p_hat,ci_lo,ci_hi,eps_log_p,failed");
    assert_eq!(lines.len(), 3);
    for l in &lines[1..] {
        let cols: Vec<&str> = l.split(',').collect();
        assert_eq!(cols[2], "0");
        assert_eq!(cols[6], "censored");
    }
}

#[test]
fn truncated_reports_stopping_times() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = run_dir(&snls(
        tmp.path(),
        &["truncated", "--path", "2", "--set", "grid.n=64", "--set", "solver.horizon=0.05", "--set", "output.fields=true"],
    ));
    let stops: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("stops.json")).unwrap()).unwrap();
    assert_eq!(stops["levels"].as_array().unwrap().len(), 4);
    let mut f = std::fs::File::open(dir.join("fields.bin")).unwrap();
    let (grid, frames) = snls::io::read_field_dump(&mut f).unwrap();
    assert_eq!(grid.n_per_dim(), 64);
    assert!((frames.last().unwrap().0 - 0.05).abs() < 1e-12);
}

#[test]
fn rate_on_calibration_style_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cal.toml");
    std::fs::write(
        &cfg,
        r#"
[grid]
n = 8
half_width = 3.141592653589793

[model]
lambda = 0.0
beta = 0.0

[noise]
b = []
g = [{ amplitude = 1.8 }]
g_shape = "linear"

[initial]
kind = "constant"
amplitude = 1.0

[event]
kind = "ball_exit"
# ‖u₀‖·2sin(½), ‖u₀‖ = √(2π)
radius = 2.403483221290983
center = "unforced"

[solver]
dt = 0.01
horizon = 1.0

[rate]
dt = 0.01
"#,
    )
    .unwrap();
    let out = tmp.path().join("runs");
    let dir = run_dir(&snls(&out, &["rate", "--config", cfg.to_str().unwrap()]));
    let rate: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("rate.json")).unwrap()).unwrap();
    let cost = rate["cost"].as_f64().unwrap();
    let exact = 1.0 / (2.0 * 1.8 * 1.8);
    assert!((cost - exact).abs() / exact < 0.05, "{cost} vs {exact}");
    assert!(dir.join("control.json").exists());
}
