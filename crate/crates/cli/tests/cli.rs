use std::path::Path;
use std::process::{Command, Output};

fn elicit(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_elicit")).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    let cfg = r#"{
        "name": "tiny",
        "environment": {"kind": "synthetic", "n_items": 60, "n_tags": 4, "dim": 3},
        "posterior": {"method": "mcmc", "mode": "iterative", "n_particles": 100},
        "acquisition": {"n_user_samples": 50},
        "optimizer": {"n_candidates": 10},
        "n_queries": 3,
        "slate_size": 3,
        "n_users": 2,
        "n_seeds": 2
    }"#;
    std::fs::write(&path, cfg).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn run_is_byte_reproducible_and_reportable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        elicit(&["run", "--config", &cfg, "--seed", "9", "--workers", "1", "--out", out.to_str().unwrap()]);
    }
    let mut names: Vec<_> = std::fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.iter().any(|n| n == "runs.json"));
    assert!(names.iter().any(|n| n == "summary.csv"));
    for n in &names {
        assert_eq!(std::fs::read(a.join(n)).unwrap(), std::fs::read(b.join(n)).unwrap(), "{n:?}");
    }
    let runs = std::fs::read_to_string(a.join("runs.json")).unwrap();
    assert!(runs.contains("\"seed\": 9"));

    let rep = dir.path().join("rep");
    elicit(&["report", a.to_str().unwrap(), b.to_str().unwrap(), "--out", rep.to_str().unwrap()]);
    assert!(rep.join("summary_tiny.csv").exists());
    assert!(rep.join("summary_tiny_1.csv").exists());
    assert_eq!(
        std::fs::read(rep.join("summary_tiny.csv")).unwrap(),
        std::fs::read(a.join("summary.csv")).unwrap()
    );
}

#[test]
fn gen_env_then_train_cav() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(
        &path,
        r#"{"environment": {"kind": "recsim", "n_users": 200, "n_items": 150, "dim": 6, "n_taggable": 3}}"#,
    )
    .unwrap();
    let env_dir = dir.path().join("env");
    let out = elicit(&["gen-env", "--config", path.to_str().unwrap(), "--seed", "3", "--out", env_dir.to_str().unwrap()]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().lines().count(), 4);
    let trained = dir.path().join("trained");
    elicit(&[
        "train-cav",
        "--tags",
        env_dir.join("tags.jsonl").to_str().unwrap(),
        "--catalog",
        env_dir.join("catalog.jsonl").to_str().unwrap(),
        "--out",
        trained.to_str().unwrap(),
    ]);
    let cavs = std::fs::read_to_string(trained.join("cavs.jsonl")).unwrap();
    assert!(cavs.lines().count() >= 1);
    for line in cavs.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["vec"].as_array().unwrap().len(), 6);
    }
}

#[test]
fn bad_config_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, r#"{"n_queries": 0}"#).unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_elicit"))
        .args(["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_queries"));
}
