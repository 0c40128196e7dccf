use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mlenkf_core::config::RunConfig;
use mlenkf_core::experiment::StudySpec;
use tempfile::TempDir;

fn mlenkf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlenkf")).args(args).env_remove("MLENKF_OUT").output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mlenkf(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json().unwrap()).unwrap();
    path
}

fn small_config() -> RunConfig {
    RunConfig {
        steps: 5,
        seed: 3,
        study: StudySpec { epsilons: vec![0.5, 0.25, 0.125], replicates: 10, steps: 3, ..StudySpec::default() },
        ..RunConfig::default()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &TempDir, name: &str, extra: &[&str]) -> PathBuf {
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join(name);
    let mut args = vec!["simulate", "--config", s(&cfg), "--out", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn simulate_is_deterministic_and_shaped() {
    let dir = TempDir::new().unwrap();
    let a = simulate(&dir, "a", &[]);
    let b = simulate(&dir, "b", &[]);
    let csv_a = std::fs::read_to_string(a.join("observations.csv")).unwrap();
    assert_eq!(csv_a, std::fs::read_to_string(b.join("observations.csv")).unwrap());
    let lines: Vec<&str> = csv_a.lines().collect();
    assert_eq!(lines.len(), 1 + 5);
    assert!(lines.iter().all(|l| l.split(',').count() == 1 + 4));

    let c = simulate(&dir, "c", &["--seed", "4"]);
    assert_ne!(csv_a, std::fs::read_to_string(c.join("observations.csv")).unwrap());
    assert!(a.join("manifest.json").exists());
}

#[test]
fn zero_steps_give_header_only_csv() {
    let dir = TempDir::new().unwrap();
    let out = simulate(&dir, "z", &["--steps", "0"]);
    assert_eq!(std::fs::read_to_string(out.join("observations.csv")).unwrap(), "n,y_1,y_2,y_3,y_4\n");
}

#[test]
fn missing_obs_flag_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = mlenkf(&["mlenkf", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--obs"));
}

#[test]
fn invalid_config_exits_with_two() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"model": {"b": 0.0, "a": 0.2, "tau": 1.0, "d": 1}}"#).unwrap();
    let out = mlenkf(&["simulate", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    std::fs::write(&bad, r#"{"unknown_key": 1}"#).unwrap();
    let out = mlenkf(&["simulate", "--config", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn filters_print_plan_and_write_one_row_per_step() {
    let dir = TempDir::new().unwrap();
    let sim = simulate(&dir, "sim", &[]);
    let cfg = write_config(dir.path(), &small_config());
    let obs = sim.join("observations.csv");
    let out = dir.path().join("ml");
    let stdout = ok(&["mlenkf", "--config", s(&cfg), "--obs", s(&obs), "--epsilon", "0.125", "--out", s(&out)]);
    let plan = stdout.lines().next().unwrap();
    assert!(plan.contains("L=6"), "{plan}");
    let sizes: Vec<String> = (0..=6).map(|l| ((4 * 36) << (6 - l)).to_string()).collect();
    assert!(plan.contains(&format!("M=[{}]", sizes.join(", "))), "{plan}");
    let est = std::fs::read_to_string(out.join("estimates_mlenkf.csv")).unwrap();
    assert_eq!(est.lines().count(), 1 + 5);

    let out = dir.path().join("en");
    ok(&["enkf", "--config", s(&cfg), "--obs", s(&obs), "--epsilon", "0.5", "--out", s(&out)]);
    let est = std::fs::read_to_string(out.join("estimates_enkf.csv")).unwrap();
    assert_eq!(est.lines().count(), 1 + 5);
    let replay = ok(&["replay", "--manifest", s(&out.join("manifest.json")), "--out", s(&dir.path().join("re"))]);
    assert!(replay.contains("byte for byte"));
}

#[test]
fn study_reports_four_slopes() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), &small_config());
    let out = dir.path().join("study");
    ok(&["study", "--config", s(&cfg), "--out", s(&out), "--jobs", "2"]);
    let slopes = std::fs::read_to_string(out.join("slopes.txt")).unwrap();
    let fitted = slopes.lines().filter(|l| l.contains(" slope ") && !l.contains("slope none")).count();
    assert_eq!(fitted, 4, "{slopes}");
    let study = std::fs::read_to_string(out.join("study.csv")).unwrap();
    assert_eq!(study.lines().count(), 1 + 2 * 3);
}
