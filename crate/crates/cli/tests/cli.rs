use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
data_n = 300
base_epochs = 5
ft_epochs = 1
ft_batch = 64
hidden = [8]
analyze_samples = 2
ig_steps = 10
";

fn asac(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_asac"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_config_exits_2() {
    let dir = TempDir::new().unwrap();
    assert_eq!(asac(dir.path(), &["generate"]).status.code(), Some(2));
    let out = asac(dir.path(), &["--config", "absent.toml", "generate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn unknown_key_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "ft_alpah = 0.3\n");
    let out = asac(dir.path(), &["--config", &cfg, "generate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ft_alpah"), "{}", stderr(&out));
}

#[test]
fn unknown_axis_and_mode_exit_2() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = asac(dir.path(), &["--config", &cfg, "sweep", "--axis", "width"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    let out = asac(dir.path(), &["--config", &cfg, "analyze", "--mode", "saliency"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn missing_artifacts_exit_3() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = asac(dir.path(), &["--config", &cfg, "--out", "run", "train-base"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(asac(dir.path(), &["--config", &cfg, "--out", "run", "generate"]).status.success());
    let out = asac(dir.path(), &["--config", &cfg, "--out", "run", "finetune"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn full_run_with_overrides() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let base = ["--config", cfg.as_str(), "--seed", "9", "--out", "run"];
    let steps: [&[&str]; 6] = [
        &["generate"],
        &["train-base"],
        &["finetune"],
        &["sweep", "--axis", "alpha", "--values", "0.3,0.7"],
        &["analyze", "--mode", "sweep"],
        &["evaluate", "--checkpoint", "run/finetuned.ckpt"],
    ];
    for step in steps {
        let args: Vec<&str> = base.iter().chain(step).copied().collect();
        let out = asac(dir.path(), &args);
        assert!(out.status.success(), "{step:?}: {}", stderr(&out));
    }
    let run = dir.path().join("run");
    for file in [
        "manifest.json",
        "base.ckpt",
        "finetuned_report.json",
        "sweep_alpha.csv",
        "robustness_base.csv",
        "evaluate_finetuned.json",
    ] {
        assert!(run.join(file).exists(), "{file} missing");
    }
    let report = fs::read_to_string(run.join("finetuned_report.json")).unwrap();
    assert!(report.contains("\"master_seed\": 9"), "{report}");
    assert_eq!(fs::read_to_string(run.join("sweep_alpha.csv")).unwrap().lines().count(), 3);
}
