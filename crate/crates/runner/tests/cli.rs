//! The CLI contract: subcommands, exit codes (0 success, 1 config error,
//! 2 numerical failure) and the output-root environment variable.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slowfast"))
}

fn write_tiny(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("cli.toml");
    fs::write(
        &path,
        r#"
name = "cli"

[model]
num_layers = 2
hidden_dim = 16
num_heads = 2
ff_dim = 32
max_seq_len = 40

[bench]
num_languages = 2
pretrain_size = 150
finetune_size = 100
val_size = 50
test_size = 50
few_shot_pool = 10
seed = 3

[bench.grammar]
vocab_size = 128
num_anchors = 8

[pretrain]
steps = 40
batch_size = 8

[finetune]
steps = 20
batch_size = 8

[experiment]
seeds = [1]
eval_every = 10
eval_batch_size = 32
"#,
    )
    .unwrap();
    path
}

#[test]
fn finetune_then_report_round_trip_with_env_output_root() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let out_root = dir.path().join("from-env");

    let status = bin()
        .args(["finetune", "--config"])
        .arg(&config)
        .env("SLOWFAST_OUT", &out_root)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out_root.join("cli/summary.json").exists(), "env output root was not honored");

    let output = bin().args(["report", "--dir"]).arg(out_root.join("cli")).output().unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("experiment cli"), "unexpected report output: {text}");

    // The --out flag wins over the environment variable.
    let flag_root = dir.path().join("from-flag");
    let status = bin()
        .args(["finetune", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&flag_root)
        .env("SLOWFAST_OUT", dir.path().join("ignored"))
        .status()
        .unwrap();
    assert!(status.success());
    assert!(flag_root.join("cli/summary.json").exists());
    assert!(!dir.path().join("ignored").exists());
}

#[test]
fn pretrain_prints_cached_checkpoint_paths() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());
    let out = bin()
        .args(["pretrain", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    let lines: Vec<&str> = std::str::from_utf8(&out.stdout).unwrap().trim().lines().collect();
    assert_eq!(lines.len(), 1);
    assert!(Path::new(lines[0]).exists(), "printed checkpoint {} missing", lines[0]);
}

#[test]
fn exit_codes_distinguish_config_and_numerical_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());

    // Missing config file -> 1.
    let status = bin()
        .args(["finetune", "--config"])
        .arg(dir.path().join("absent.toml"))
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // Invalid override -> 1.
    let status = bin()
        .args(["finetune", "--config"])
        .arg(&config)
        .args(["--set", "policy.c1=7.0", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));

    // Diverging run -> 2.
    let status = bin()
        .args(["finetune", "--config"])
        .arg(&config)
        .args([
            "--set",
            "finetune.base_lr=1e9",
            "--set",
            "finetune.adam.beta1=0.0",
            "--set",
            "finetune.adam.beta2=0.0",
            "--set",
            "finetune.adam.eps=0.0",
            "--set",
            "finetune.steps=200",
            "--set",
            "name=blowup",
            "--out",
        ])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
    assert!(dir.path().join("blowup/seed1/FAILED").exists());
}

#[test]
fn probe_and_grid_subcommands_produce_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_tiny(dir.path());

    let out = bin()
        .args(["probe", "--config"])
        .arg(&config)
        .args(["--kind", "freeze", "--layers", "1", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("baseline"), "{text}");
    assert!(dir.path().join("cli-freeze-sweep.csv").exists());

    let out = bin()
        .args(["grid", "--config"])
        .arg(&config)
        .args(["--axis", "m", "--values", "0,2", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(dir.path().join("cli-grid-m.csv").exists());

    // Unknown axis -> config error.
    let status = bin()
        .args(["grid", "--config"])
        .arg(&config)
        .args(["--axis", "zeta", "--out"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(1));
}
