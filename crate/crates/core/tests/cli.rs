//! The `agro-lab` binary: output files, exit codes and reproducibility.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn agro_lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_agro-lab"))
        .args(args)
        .env_remove("AGRO_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const VALID: &str = r#"{"env": {"kind": "canonical"}, "beta": 0.5, "estimator": "on_policy_agro_full",
    "steps": 50, "learning_rate": 0.5, "eval_every": 5, "seed": 3}"#;

#[test]
fn run_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VALID);
    let out = dir.path().join("out");
    let o = agro_lab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["metrics.jsonl", "summary.csv", "trajectory.svg", "run.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let jsonl = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 10);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["step"], 5);
    assert!(first["objective_G"].is_f64());
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 3);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VALID);
    let out = dir.path().join("out");
    let o = agro_lab(&["run", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "41"]);
    assert_eq!(o.status.code(), Some(0));
    let run: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["seed"], 41);
}

#[test]
fn out_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VALID);
    let out = dir.path().join("from_env");
    let o = Command::new(env!("CARGO_BIN_EXE_agro-lab"))
        .args(["run", "--config", &cfg])
        .env("AGRO_OUT_DIR", &out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("summary.csv").exists());
}

#[test]
fn missing_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    let o = agro_lab(&["run", "--config", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not found"));
}

#[test]
fn bad_mix_p_exits_3_naming_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"beta": 0.5, "estimator": "off_policy_agro", "steps": 5, "learning_rate": 0.1,
            "sampling_mode": "buffer_mix", "mix_p": 1.5}"#,
    );
    let o = agro_lab(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mix_p"), "{}", stderr(&o));
    assert_eq!(stderr(&o).trim().lines().count(), 1);
}

#[test]
fn zero_beta_agro_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"beta": 0.0, "estimator": "off_policy_agro", "steps": 5, "learning_rate": 0.1}"#,
    );
    let o = agro_lab(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("beta > 0"), "{}", stderr(&o));
}

#[test]
fn unknown_estimator_lists_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"beta": 1.0, "estimator": "ppo", "steps": 5, "learning_rate": 0.1}"#);
    let o = agro_lab(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("rloo"));
}

#[test]
fn divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"beta": 0.01, "estimator": "rloo", "steps": 2000, "learning_rate": 5.0, "divergence_kl": 0.3}"#,
    );
    let o = agro_lab(&["run", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn figure1_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = agro_lab(&["figure1", "--out", d.path().to_str().unwrap(), "--seed", "5"]);
        assert!(o.status.code() == Some(0) || o.status.code() == Some(1), "{}", stderr(&o));
        assert!(String::from_utf8_lossy(&o.stdout).contains("verdict:"));
    }
    let csv_a = fs::read(a.path().join("figure1.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.path().join("figure1.csv")).unwrap());
    let header = String::from_utf8_lossy(&csv_a).lines().next().unwrap().to_string();
    assert_eq!(header, "env,estimator,step,normalized_kl,kl_to_star");
    assert!(a.path().join("figure1.svg").exists());
}

#[test]
fn svg_does_not_affect_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VALID);
    let out = dir.path().join("out");
    agro_lab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    let first = fs::read(out.join("summary.csv")).unwrap();
    fs::remove_file(out.join("trajectory.svg")).unwrap();
    let o = agro_lab(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(first, fs::read(out.join("summary.csv")).unwrap());
}

#[test]
fn sweep_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), VALID);
    let out = dir.path().join("sweep");
    let o = agro_lab(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--betas", "0.1,1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert!(text.starts_with("beta,error,step,"));
    assert_eq!(text.lines().count(), 1 + 2 * 10);
}

#[test]
fn verify_theorems_passes() {
    let o = agro_lab(&["verify", "--suite", "theorems"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
}

#[test]
fn verify_unknown_suite_exits_3() {
    let o = agro_lab(&["verify", "--suite", "everything"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn variance_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = agro_lab(&["variance", "--out", dir.path().to_str().unwrap(), "--samples", "2000"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = fs::read_to_string(dir.path().join("variance.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 6);
}
