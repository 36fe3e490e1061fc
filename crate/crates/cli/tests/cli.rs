use std::path::Path;
use std::process::{Command, Output};

fn sppm(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_sppm"));
    cmd.args(args).env_remove("FEDPROX_SIM_SEED");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, sampling: &str, extra: &str) -> String {
    let text = format!(
        r#"{{
  "schema_version": 1,
  "dataset": {{"source": "quadratic", "n": 6, "d": 3, "seed": 4}},
  "run": {{"algorithm": "sppm_as", "gamma": 1.0, "rounds": 12,
           "sampling": {sampling}, "solver": {{"solver": "bfgs", "K": 3}}}},
  "seeds": [1, 2]{extra},
  "output_dir": "out_{name}"
}}"#
    );
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, text).unwrap();
    path.display().to_string()
}

#[test]
fn run_writes_one_row_per_round_plus_initial() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "basic", r#"{"type": "nice", "tau": 2}"#, "");
    let out = sppm(&["run", "--config", &cfg], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("out_basic/trajectory_seed1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 13);
    assert!(tmp.path().join("out_basic/manifest.json").exists());
}

#[test]
fn invalid_sampling_exits_with_config_code() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad", r#"{"type": "nice", "tau": 9}"#, "");
    let out = sppm(&["run", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("tau"), "{err}");
    assert!(!tmp.path().join("out_bad").join("trajectory_seed1.csv").exists());
}

#[test]
fn unknown_field_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "typo", r#"{"type": "nice", "tua": 2}"#, "");
    let out = sppm(&["run", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("run.sampling"));
}

#[test]
fn missing_config_is_io_error() {
    let out = sppm(&["run", "--config", "/nonexistent/cfg.json"], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "det", r#"{"type": "nice", "tau": 3}"#, "");
    let read = || std::fs::read(tmp.path().join("out_det/trajectory_seed2.csv")).unwrap();
    assert!(sppm(&["run", "--config", &cfg, "--jobs", "1"], &[]).status.success());
    let first = read();
    assert!(sppm(&["run", "--config", &cfg, "--jobs", "3"], &[]).status.success());
    assert_eq!(first, read());

    // Rerunning from the manifest reproduces the same bytes.
    let manifest = tmp.path().join("out_det/manifest.json").display().to_string();
    assert!(sppm(&["run", "--config", &manifest], &[]).status.success());
    assert_eq!(first, read());
}

#[test]
fn seed_environment_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "env", r#"{"type": "nice", "tau": 2}"#, "");
    let out = sppm(&["run", "--config", &cfg], &[("FEDPROX_SIM_SEED", "7")]);
    assert!(out.status.success());
    let dir = tmp.path().join("out_env");
    assert!(dir.join("trajectory_seed7.csv").exists());
    assert!(!dir.join("trajectory_seed1.csv").exists());

    let bad = sppm(&["run", "--config", &cfg], &[("FEDPROX_SIM_SEED", "seven")]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn sweep_covers_the_grid_and_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let ks: Vec<String> = (1..=15).map(|k| k.to_string()).collect();
    let extra = format!(
        r#",
  "sweep": {{"gammas": [100.0, 1000.0], "K": [{}], "t_max": 60, "baseline_ks": [1, 2, 4]}}"#,
        ks.join(", ")
    );
    let cfg = write_config(tmp.path(), "sweep", r#"{"type": "nice", "tau": 3}"#, &extra);
    let out = sppm(&["sweep", "--config", &cfg], &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = tmp.path().join("out_sweep");
    let cells = std::fs::read_to_string(dir.join("sweep.csv")).unwrap();
    assert_eq!(cells.lines().next(), Some("gamma,K,T_eps,total_cost,reached"));
    assert_eq!(cells.lines().count(), 1 + 30);
    let baseline = std::fs::read_to_string(dir.join("baseline.csv")).unwrap();
    assert_eq!(baseline.lines().count(), 1 + 3);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert!(summary.get("hierarchical").is_some());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("hierarchical cost"), "{stdout}");
}

#[test]
fn sweep_without_grid_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "nogrid", r#"{"type": "full"}"#, "");
    assert_eq!(sppm(&["sweep", "--config", &cfg], &[]).status.code(), Some(2));
}

#[test]
fn verify_quick_passes() {
    let out = sppm(&["verify", "--level", "quick"], &[]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}");
    assert!(!stdout.contains("FAIL"), "{stdout}");
}
