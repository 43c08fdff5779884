//! End-to-end checks of the binary: argument plumbing and exit codes.

use std::path::Path;
use std::process::Command;

fn reglab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reglab"))
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path
}

const SMALL: &str = r#"{
  "method": "baseline",
  "model": { "image_size": 16, "patch_size": 4, "depth": 2, "heads": 2,
             "dim": 16, "n_classes": 4, "register_count": 4 },
  "data": { "source_classes": 4, "source_images_per_class": 8,
            "target_classes": 3, "target_images_per_class": 8 },
  "train": { "epochs": 1, "batch_size": 16 },
  "eval": { "n_way": 3, "k_shot": 2, "q_queries": 3, "episodes": 3 },
  "analyze": { "sigmas": [0.0, 0.1], "draws": 2, "cka_batch": 8,
               "sharpness_n_way": 3, "sharpness_k_shot": 2, "sharpness_q_queries": 2 },
  "seeds": [0]
}"#;

#[test]
fn full_pipeline_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    for cmd in ["gen-data", "train", "eval", "analyze"] {
        let out = reglab()
            .args([cmd, "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .output()
            .unwrap();
        assert!(
            out.status.success(),
            "{cmd} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    assert!(dir.path().join("datasets/source.rlds").exists());
    assert!(dir.path().join("run.log").exists());
}

#[test]
fn validation_error_exits_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    // reap knobs on a baseline method: validation error
    let cfg = write_config(
        dir.path(),
        r#"{ "method": "baseline", "seeds": [0], "reap": {} }"#,
    );
    let out = reglab()
        .args(["gen-data", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_artifact_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    // eval before train: runtime error
    let out = reglab()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing artifact"), "{stderr}");
}

#[test]
fn seed_override_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let ok = |args: &[&str]| {
        let out = reglab()
            .args(args)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path())
            .args(["--seed-override", "3"])
            .output()
            .unwrap();
        assert!(out.status.success(), "{:?}", String::from_utf8_lossy(&out.stderr));
    };
    ok(&["gen-data"]);
    ok(&["train"]);
}
