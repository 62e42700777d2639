use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("spinhist-cli-{}-{name}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn spinhist(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_spinhist"));
    cmd.args(args).env_remove("SPINHIST_DENSE_THRESHOLD");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn relax_runs_and_manifest_replays() {
    let dir = scratch("relax");
    let cfg = write_config(&dir, r#"{"num_spins": 8, "t_points": 21}"#);
    let first = dir.join("first");
    let out = spinhist(&["relax", "--config", &cfg, "--out", first.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    for f in ["relaxation.csv", "master_fit.csv", "rates.csv", "transition_matrix.csv", "manifest.json", "summary.txt"] {
        assert!(first.join(f).exists(), "missing {f}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(first.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["experiment"], "relax");
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);

    let second = dir.join("second");
    let manifest_path = first.join("manifest.json");
    let out = spinhist(&["relax", "--config", manifest_path.to_str().unwrap(), "--out", second.to_str().unwrap()], &[]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(first.join("relaxation.csv")).unwrap(), fs::read(second.join("relaxation.csv")).unwrap());
}

#[test]
fn seeded_runs_are_reproducible() {
    let dir = scratch("haar");
    let cfg = write_config(&dir, r#"{"dims": [8, 16], "samples": 16}"#);
    let run = |sub: &str| {
        let out_dir = dir.join(sub);
        let out = spinhist(&["haar-consistency", "--config", &cfg, "--seed", "17", "--out", out_dir.to_str().unwrap()], &[]);
        assert!(out.status.success(), "{}", stderr(&out));
        fs::read(out_dir.join("haar_consistency.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn randomized_experiment_without_seed_is_a_config_error() {
    let dir = scratch("noseed");
    let out = spinhist(&["haar-markov", "--out", dir.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("seed"));
}

#[test]
fn bad_spin_count_is_a_config_error() {
    let dir = scratch("n13");
    let cfg = write_config(&dir, r#"{"num_spins": 13}"#);
    let out = spinhist(&["relax", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("multiple of 4"), "{}", stderr(&out));
}

#[test]
fn unknown_config_field_is_a_config_error() {
    let dir = scratch("unknown");
    let cfg = write_config(&dir, r#"{"num_spin": 8}"#);
    let out = spinhist(&["relax", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn mismatched_experiment_is_a_config_error() {
    let dir = scratch("mismatch");
    let cfg = write_config(&dir, r#"{"experiment": "tau_sweep", "num_spins": 8}"#);
    let out = spinhist(&["relax", "--config", &cfg], &[]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn dense_threshold_is_a_resource_error() {
    let dir = scratch("threshold");
    let cfg = write_config(&dir, r#"{"num_spins": 8}"#);
    let out = spinhist(
        &["relax", "--config", &cfg, "--out", dir.join("o").to_str().unwrap()],
        &[("SPINHIST_DENSE_THRESHOLD", "10")],
    );
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}
