use std::path::Path;
use std::process::{Command, Output};

use seer_core::feature_wgan::GuidanceConfig;
use seer_core::pipeline::{DataSource, RunConfig};

fn seer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seer")).args(args).output().expect("spawn seer")
}

fn tiny_config(data: &Path) -> RunConfig {
    RunConfig {
        data: DataSource::Directory { path: data.to_path_buf() },
        z_dim: 4,
        vae_hidden: 16,
        generator_hidden: vec![16, 16],
        cvae_hidden: 16,
        outer_iterations: 1,
        vae_epochs: 2,
        vae_steps_per_epoch: 2,
        wgan_epochs: 1,
        wgan_iterations_per_epoch: 2,
        cvae_epochs: 2,
        batch_size: 16,
        per_class_samples: 5,
        generated_per_class: 5,
        guidance: GuidanceConfig {
            max_epochs: 5,
            ..GuidanceConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn gen_data_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = seer(&[
        "gen-data",
        "--classes",
        "8",
        "--per-class",
        "20",
        "--d-sem",
        "4",
        "--visual-dim",
        "6",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(data.join("split.json").exists());

    let cfg_path = tmp.path().join("config.json");
    tiny_config(&data).save(&cfg_path).unwrap();
    let run = tmp.path().join("run");
    let out = seer(&["train", "--config", cfg_path.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).contains("H="));
    assert!(run.join("metrics.json").exists());
    assert!(run.join("anchors.csv").exists());

    let out = seer(&["eval", "--run", run.to_str().unwrap(), "--accuracy", "overall"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("\"h\""), "{stdout}");
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_one() {
    let out = seer(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).to_lowercase().contains("usage"));
}

#[test]
fn missing_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = seer(&[
        "train",
        "--config",
        tmp.path().join("absent.json").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bad_ablation_name_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("config.json");
    RunConfig::default().save(&cfg_path).unwrap();
    let out = seer(&[
        "ablate",
        "--config",
        cfg_path.to_str().unwrap(),
        "--drop",
        "decoder",
        "--out",
        tmp.path().join("abl").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
