//! End-to-end pipeline through the binary: data generation, both training
//! stages, evaluation, prompt export, plus exit-code and determinism checks.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use promptmd_core::engine::load_checkpoint;
use promptmd_core::engine::params::PartitionSet;

fn promptmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptmd"))
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn tiny_config() -> &'static str {
    r#"{
        "seed": 77,
        "sim": { "friction": 8.0, "stride": 200, "train_frames": 30, "test_frames": 14 },
        "temps": { "train": [0.8, 1.2], "unseen": [1.0], "ood": [1.5] },
        "model": { "d_h": 4, "d_s": 6, "d_p": 3, "hidden": 8, "prompt_hidden": 8, "predictor_layers": 1 },
        "stage1": { "epochs": 2, "e_pre": 1, "e_period": 1, "n_period": 8, "n_min": 4, "log_every": 1 },
        "meta": { "epochs": 1, "support_batch": 6, "query_batch": 6 },
        "protocol": { "trials": 2, "finetune_epochs": 1 }
    }"#
}

#[test]
fn full_pipeline_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, tiny_config()).unwrap();
    let cfg = ["--config", cfg_path.to_str().unwrap()];

    // Data generation: 2 train + 1 unseen + 1 ood files plus the manifest.
    let data = dir.path().join("data");
    let out = promptmd()
        .args(cfg)
        .args(["gen-data", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_success(&out, "gen-data");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["entries"].as_array().unwrap().len(), 4);
    assert!(data.join("resolved_config.json").exists());
    let trj_count = fs::read_dir(&data)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "trj")
        })
        .count();
    assert_eq!(trj_count, 4);

    // Same seed, second directory: identical bytes.
    let data2 = dir.path().join("data2");
    let out = promptmd()
        .args(cfg)
        .args(["gen-data", "--out", data2.to_str().unwrap()])
        .output()
        .unwrap();
    assert_success(&out, "gen-data rerun");
    assert_eq!(
        fs::read(data.join("manifest.json")).unwrap(),
        fs::read(data2.join("manifest.json")).unwrap()
    );

    // Prompt-only baseline: no mixed updates anywhere in the log.
    let po_dir = dir.path().join("prompt_only");
    let out = promptmd()
        .args(cfg)
        .args([
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            po_dir.to_str().unwrap(),
            "--no-mixup",
        ])
        .output()
        .unwrap();
    assert_success(&out, "pretrain --no-mixup");
    let po_log = fs::read_to_string(po_dir.join("pretrain.log")).unwrap();
    assert!(!po_log.contains("kind=mixer"));
    assert!(!po_log.contains("kind=mixed_backbone"));

    // Mixed pre-training: mixing starts exactly after the pre-phase.
    let nm_dir = dir.path().join("no_meta");
    let out = promptmd()
        .args(cfg)
        .args([
            "pretrain",
            "--data",
            data.to_str().unwrap(),
            "--out",
            nm_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out, "pretrain");
    let nm_log = fs::read_to_string(nm_dir.join("pretrain.log")).unwrap();
    assert!(nm_log.contains("epoch=1 mixing=false"));
    assert!(nm_log.contains("epoch=2 mixing=true"));
    assert!(nm_log.contains("kind=mixer"));

    // Meta stage: backbone and structure mixer pass through bitwise.
    let meta_dir = dir.path().join("meta");
    let out = promptmd()
        .args(cfg)
        .args([
            "meta",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            nm_dir.join("model.ckpt").to_str().unwrap(),
            "--out",
            meta_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out, "meta");
    let stage1 = load_checkpoint(&nm_dir.join("model.ckpt")).unwrap();
    let full = load_checkpoint(&meta_dir.join("meta.ckpt")).unwrap();
    assert!(full.partition_eq(&stage1, PartitionSet::BACKBONE));
    assert!(full.partition_eq(&stage1, PartitionSet::STRUCT_MIX));
    assert!(!full.partition_eq(&stage1, PartitionSet::PROMPT));
    let meta_log = fs::read_to_string(meta_dir.join("meta.log")).unwrap();
    assert_eq!(meta_log.matches("outer_step=1").count(), 1);

    // Evaluation: CSV + text report, deterministic across reruns.
    let eval_dir = dir.path().join("eval");
    let eval_args = |outdir: &Path| {
        let mut c = promptmd();
        c.args(cfg).args([
            "eval",
            "--data",
            data.to_str().unwrap(),
            "--ckpt-prompt-only",
            po_dir.join("model.ckpt").to_str().unwrap(),
            "--ckpt-no-meta",
            nm_dir.join("model.ckpt").to_str().unwrap(),
            "--ckpt-full",
            meta_dir.join("meta.ckpt").to_str().unwrap(),
            "--out",
            outdir.to_str().unwrap(),
        ]);
        c
    };
    let out = eval_args(&eval_dir).output().unwrap();
    assert_success(&out, "eval");
    let report = fs::read_to_string(eval_dir.join("report.txt")).unwrap();
    let aggregate_rows = report
        .lines()
        .filter(|l| {
            (l.starts_with("prompt_only ") || l.starts_with("no_meta ") || l.starts_with("full "))
                && !l.contains("T=")
        })
        .count();
    assert_eq!(aggregate_rows, 9);
    assert!(report.contains("config:"));

    let eval_dir2 = dir.path().join("eval2");
    let out = eval_args(&eval_dir2).output().unwrap();
    assert_success(&out, "eval rerun");
    assert_eq!(
        fs::read(eval_dir.join("report.csv")).unwrap(),
        fs::read(eval_dir2.join("report.csv")).unwrap()
    );

    // Prompt export: temperature, trial, d_p columns, pc1, pc2.
    let prompts_dir = dir.path().join("prompts");
    let out = promptmd()
        .args(cfg)
        .args([
            "export-prompts",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            meta_dir.join("meta.ckpt").to_str().unwrap(),
            "--out",
            prompts_dir.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out, "export-prompts");
    let csv = fs::read_to_string(prompts_dir.join("prompts.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 4 + 3);
    assert!(csv.contains("1.5,"));
}

#[test]
fn print_config_dumps_resolved_defaults() {
    let out = promptmd().arg("--print-config").output().unwrap();
    assert_success(&out, "--print-config");
    let cfg: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["stage1"]["n_period"], 256);
    assert_eq!(cfg["protocol"]["finetune_epochs"], 3);
}

#[test]
fn invalid_config_exits_one_and_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.json");
    fs::write(
        &cfg_path,
        r#"{ "temps": { "train": [0.8, -1.0], "unseen": [], "ood": [] } }"#,
    )
    .unwrap();
    let out = promptmd()
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["gen-data", "--out", dir.path().join("x").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("temps.train[1]"), "stderr: {stderr}");
}

#[test]
fn missing_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, tiny_config()).unwrap();
    let data = dir.path().join("data");
    let out = promptmd()
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["gen-data", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_success(&out, "gen-data");
    let out = promptmd()
        .args(["--config", cfg_path.to_str().unwrap()])
        .args([
            "meta",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            dir.path().join("nope.ckpt").to_str().unwrap(),
            "--out",
            dir.path().join("m").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupt_checkpoint_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, tiny_config()).unwrap();
    let data = dir.path().join("data");
    let out = promptmd()
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["gen-data", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_success(&out, "gen-data");
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"PMDCKPT1 garbage that is not a checkpoint").unwrap();
    let out = promptmd()
        .args(["--config", cfg_path.to_str().unwrap()])
        .args([
            "meta",
            "--data",
            data.to_str().unwrap(),
            "--ckpt",
            bad.to_str().unwrap(),
            "--out",
            dir.path().join("m").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_env_override_wins() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("config.json");
    fs::write(&cfg_path, tiny_config()).unwrap();
    let data = dir.path().join("data");
    let out = promptmd()
        .env("PROMPTMD_SEED", "5")
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["gen-data", "--out", data.to_str().unwrap()])
        .output()
        .unwrap();
    assert_success(&out, "gen-data with env seed");
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);

    let out = promptmd()
        .env("PROMPTMD_SEED", "not-a-number")
        .args(["--config", cfg_path.to_str().unwrap()])
        .args(["gen-data", "--out", dir.path().join("y").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
