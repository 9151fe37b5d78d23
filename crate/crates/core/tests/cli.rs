//! CLI contract tests: exit codes, artifacts on disk, reproducible
//! generation. Runs the real binary.

use std::path::Path;
use std::process::Command;

fn gensdf() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gensdf"))
}

fn tiny_gen(dir: &Path, seed: u64) {
    let status = gensdf()
        .args([
            "gen-data",
            "--out",
            dir.to_str().unwrap(),
            "--seed",
            &seed.to_string(),
            "--cloud-size",
            "128",
            "--labeled-per-category",
            "2",
            "--unlabeled",
            "2",
            "--test-per-category",
            "1",
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

const TINY_CONFIG: &str = r#"{
  "train": {
    "epochs": 2,
    "queries_per_cloud": 32,
    "cloud_size": 128,
    "point_subsample": 32,
    "learning_rate": 0.001
  },
  "encoder": {
    "variant": "grid-local",
    "point_mlp_widths": [8],
    "latent_dim": 8,
    "grid_resolution": 4
  },
  "decoder": { "hidden": [16] }
}"#;

#[test]
fn gen_data_is_reproducible_across_directories() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_gen(a.path(), 5);
    tiny_gen(b.path(), 5);
    let read = |d: &Path| {
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d.join("manifest.json")).unwrap())
                .unwrap();
        manifest["entries"]
            .as_array()
            .unwrap()
            .iter()
            .map(|e| e["sha256"].as_str().unwrap().to_string())
            .collect::<Vec<_>>()
    };
    assert_eq!(read(a.path()), read(b.path()));
}

#[test]
fn train_reconstruct_eval_round_trip() {
    let data = tempfile::tempdir().unwrap();
    tiny_gen(data.path(), 7);
    let run = tempfile::tempdir().unwrap();
    let run_dir = run.path().join("run1");
    let cfg_path = run.path().join("config.json");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();

    // Dry run prints config and stats, writes nothing.
    let out = gensdf()
        .args([
            "train",
            "--stage",
            "1",
            "--data",
            data.path().to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--dry-run",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("dataset:"));
    assert!(!run_dir.exists());

    // Real stage-1 run produces checkpoints, metrics, config, run manifest.
    let status = gensdf()
        .args([
            "train",
            "--stage",
            "1",
            "--data",
            data.path().to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let final_ckpt = run_dir.join("checkpoints").join("final.gsdf");
    assert!(final_ckpt.exists());
    assert!(run_dir.join("metrics.csv").exists());
    assert!(run_dir.join("run.json").exists());
    assert!(run_dir.join("config.json").exists());
    assert!(!run_dir.join(".lock").exists(), "lock released");

    // Stage 2 without --init and without --from-scratch is a usage error.
    let out = gensdf()
        .args([
            "train",
            "--stage",
            "2",
            "--data",
            data.path().to_str().unwrap(),
            "--out",
            run.path().join("run2").to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Stage 2 from the stage-1 checkpoint.
    let status = gensdf()
        .args([
            "train",
            "--stage",
            "2",
            "--data",
            data.path().to_str().unwrap(),
            "--out",
            run.path().join("run2").to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
            "--init",
            final_ckpt.to_str().unwrap(),
        ])
        .status()
        .unwrap();
    assert!(status.success());

    // Reconstruct a test cloud.
    let cloud = data.path().join("torus-000.xyz");
    let obj = run.path().join("torus.obj");
    let status = gensdf()
        .args([
            "reconstruct",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--cloud",
            cloud.to_str().unwrap(),
            "--out",
            obj.to_str().unwrap(),
            "--resolution",
            "16",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(obj.exists());

    // Noise-mode evaluation emits one row per variance.
    let report = run.path().join("report");
    let status = gensdf()
        .args([
            "eval",
            "--checkpoint",
            final_ckpt.to_str().unwrap(),
            "--data",
            data.path().to_str().unwrap(),
            "--mode",
            "noise",
            "--report",
            report.to_str().unwrap(),
            "--resolution",
            "16",
            "--cd-samples",
            "500",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    let noise_csv = std::fs::read_to_string(report.join("noise.csv")).unwrap();
    // Header plus the six default variances.
    assert_eq!(noise_csv.lines().count(), 7);
}

#[test]
fn missing_checkpoint_is_a_usage_error() {
    let out = gensdf()
        .args([
            "reconstruct",
            "--checkpoint",
            "/nonexistent/model.gsdf",
            "--cloud",
            "/nonexistent/cloud.xyz",
            "--out",
            "/tmp/out.obj",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn locked_run_directory_is_rejected() {
    let data = tempfile::tempdir().unwrap();
    tiny_gen(data.path(), 9);
    let run = tempfile::tempdir().unwrap();
    let run_dir = run.path().join("run");
    std::fs::create_dir_all(&run_dir).unwrap();
    std::fs::write(run_dir.join(".lock"), "").unwrap();
    let cfg_path = run.path().join("config.json");
    std::fs::write(&cfg_path, TINY_CONFIG).unwrap();
    let out = gensdf()
        .args([
            "train",
            "--stage",
            "1",
            "--data",
            data.path().to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--config",
            cfg_path.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}
