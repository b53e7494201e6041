//! End-to-end tests of the `mmfusion` binary: generate a dataset, train,
//! evaluate, predict, smooth, vote, and exercise the error contract.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mmfusion"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn mmfusion");
    assert!(
        out.status.success(),
        "mmfusion {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_tiny_config(dir: &Path, dataset: &Path, out_dir: &Path) -> PathBuf {
    let text = format!(
        r#"
task = "expr"
seed = 5
float32 = true

[features]
d_s = 16
d_e = 8
d_a = 8
d_w = 8

[model]
m = 4
model_dim = 16
heads = 4
gru_layers = 1
gru_hidden = 16
head_hidden = 16
fusion = "transformer"

[model.modalities]
expr_emb = true
audio = true
word = true

[optimizer]
lr_max = 0.05
lr_min = 0.0
restart_epochs = 2.0
period_multiplier = 2.0
momentum = 0.9
clip_norm = 5.0

[training]
batch_size = 16
epochs = 3
folds = 3

[resample]
n_minor = 48
n_major = 48
minority_classes = [1, 2, 3, 5, 6]

[remix]
enabled = true
alpha = 1.0
kappa = 3.0
tau = 0.5
prob = 0.5

[smoothing]
majority = {{ run_threshold = 3, window_radius = 5 }}
minority = {{ run_threshold = 2, window_radius = 4 }}
smooth_au = true

[paths]
dataset = "{}"
out_dir = "{}"
"#,
        dataset.display(),
        out_dir.display()
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = tmp.path().join("data.mmds");
    let out_dir = tmp.path().join("out");

    // gen-data: deterministic given the seed
    run_ok(&[
        "gen-data",
        "--preset",
        "ci",
        "--seed",
        "5",
        "--videos-per-class",
        "2",
        "--frames",
        "48",
        "--run-min",
        "6",
        "--run-max",
        "8",
        "--out",
        dataset.to_str().unwrap(),
    ]);
    let again = tmp.path().join("data2.mmds");
    run_ok(&[
        "gen-data",
        "--preset",
        "ci",
        "--seed",
        "5",
        "--videos-per-class",
        "2",
        "--frames",
        "48",
        "--run-min",
        "6",
        "--run-max",
        "8",
        "--out",
        again.to_str().unwrap(),
    ]);
    assert_eq!(
        std::fs::read(&dataset).unwrap(),
        std::fs::read(&again).unwrap(),
        "same seed must give byte-identical dataset files"
    );

    let config = write_tiny_config(tmp.path(), &dataset, &out_dir);

    // train one fold
    run_ok(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--folds",
        "0",
    ]);
    assert!(out_dir.join("fold0.ckpt").is_file());
    assert!(out_dir.join("report.json").is_file());
    assert!(out_dir.join("folds.csv").is_file());
    assert!(out_dir.join("config.toml").is_file());
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["task"], "expr");
    assert!(report["folds"][0]["raw"]["macro_avg"].as_f64().unwrap() > 0.0);

    // eval the trained fold's validation split
    run_ok(&[
        "eval",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("fold0.ckpt").to_str().unwrap(),
        "--folds-file",
        out_dir.join("folds.csv").to_str().unwrap(),
        "--fold",
        "0",
    ]);
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["class_names"].as_array().unwrap().len(), 8);
    assert!(metrics["sample_count"].as_u64().unwrap() > 0);
    assert!(out_dir.join("predictions_raw.txt").is_file());
    assert!(out_dir.join("predictions_smoothed.txt").is_file());

    // predict over the whole dataset, smooth it, vote raw vs smoothed
    let preds = tmp.path().join("preds.txt");
    run_ok(&[
        "predict",
        "--config",
        config.to_str().unwrap(),
        "--checkpoint",
        out_dir.join("fold0.ckpt").to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    let smoothed = tmp.path().join("preds_smoothed.txt");
    run_ok(&[
        "smooth",
        "--config",
        config.to_str().unwrap(),
        "--input",
        preds.to_str().unwrap(),
        "--out",
        smoothed.to_str().unwrap(),
    ]);
    // smoothing must not mutate its input
    assert!(preds.is_file());
    let voted = tmp.path().join("voted.txt");
    run_ok(&[
        "vote",
        "--input",
        preds.to_str().unwrap(),
        "--input",
        smoothed.to_str().unwrap(),
        "--input",
        preds.to_str().unwrap(),
        "--out",
        voted.to_str().unwrap(),
    ]);
    // 2-of-3 majority with two copies of the raw file returns the raw file
    assert_eq!(
        std::fs::read(&voted).unwrap(),
        std::fs::read(&preds).unwrap()
    );
}

#[test]
fn vote_with_one_input_fails_with_machine_readable_error() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("a.txt");
    std::fs::write(&input, "v,0,1\n").unwrap();
    let out = bin()
        .args([
            "vote",
            "--input",
            input.to_str().unwrap(),
            "--out",
            tmp.path().join("o.txt").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let first_line = stderr.lines().next().unwrap();
    let parsed: serde_json::Value = serde_json::from_str(first_line).expect("machine line");
    assert_eq!(parsed["error"], "contract");
    assert!(parsed["message"].as_str().unwrap().contains(">= 2"));
}

#[test]
fn unknown_preset_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "gen-data",
            "--preset",
            "bogus",
            "--out",
            tmp.path().join("x.mmds").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(parsed["error"], "config");
}

#[test]
fn gradcheck_reports_every_op_and_exits_zero() {
    let out = run_ok(&["gradcheck"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for op in ["op.matmul", "op.softmax", "op.layer_norm", "fusion_block", "model.au"] {
        assert!(stdout.contains(op), "gradcheck output missing {}", op);
    }
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn dataset_dim_mismatch_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dataset = tmp.path().join("data.mmds");
    run_ok(&[
        "gen-data",
        "--preset",
        "ablation", // dims 8/8/8/8, not the ci 16/8/8/8
        "--out",
        dataset.to_str().unwrap(),
    ]);
    let out_dir = tmp.path().join("out");
    let config = write_tiny_config(tmp.path(), &dataset, &out_dir);
    let out = bin()
        .args(["train", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let parsed: serde_json::Value =
        serde_json::from_str(stderr.lines().next().unwrap()).unwrap();
    assert_eq!(parsed["error"], "format");
}
