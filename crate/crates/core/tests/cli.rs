use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hetvae::checkpoint::Checkpoint;
use hetvae::data::read_dataset;
use serde_json::{json, Value};

fn hetvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = hetvae(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, iterations: u64) -> PathBuf {
    let cfg = json!({
        "synthetic": { "n_trajectories": 20 },
        "model": { "n_ref": 4, "embed_dim": 8, "untan_dim": 8, "latent_dim": 4, "mlp_width": 8 },
        "train": { "iterations": iterations, "batch_size": 4 },
        "eval": { "samples": 3, "seeds": 2 }
    });
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn generate_splits_ten_cases_six_two_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["generate", "--n", "10", "--seed", "3", "--out", s(&out)]);
    let sizes: Vec<usize> = ["train", "val", "test"]
        .iter()
        .map(|f| read_dataset(out.join(format!("{f}.jsonl"))).unwrap().len())
        .collect();
    assert_eq!(sizes, [6, 2, 2]);
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["counts"]["train"], 6);
    assert_eq!(manifest["meta"]["seed"], 3);
    assert_eq!(manifest["meta"]["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn generate_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    ok(&["generate", "--n", "10", "--out", s(&out)]);
    let first = std::fs::read(out.join("train.jsonl")).unwrap();
    let again = hetvae(&["generate", "--n", "10", "--out", s(&out)]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["generate", "--n", "10", "--out", s(&out), "--force"]);
    assert_eq!(std::fs::read(out.join("train.jsonl")).unwrap(), first);
}

#[test]
fn zero_iterations_writes_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let ckpt = Checkpoint::load(run.join("checkpoint.json")).unwrap();
    assert_eq!(ckpt.step(), 0);
    assert!(ckpt.history.is_empty());
    let init = hetvae::model::Hetvae::new(ckpt.model.config.clone(), ckpt.model.union.clone(), 0).unwrap();
    assert_eq!(init.params, ckpt.model.params);
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(csv.trim(), hetvae::objective::HISTORY_HEADER);
}

#[test]
fn resume_matches_uninterrupted_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 6);
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);

    let straight = dir.path().join("straight");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&straight)]);

    let split = dir.path().join("split");
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&split), "--iterations", "3"]);
    let partial = split.join("checkpoint.json");
    let resumed = dir.path().join("resumed");
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&partial),
    ]);

    let a = Checkpoint::load(straight.join("checkpoint.json")).unwrap();
    let b = Checkpoint::load(resumed.join("checkpoint.json")).unwrap();
    assert_eq!(b.step(), 6);
    assert_eq!(a.model.params, b.model.params);
    assert_eq!(a.history, b.history);
    assert_eq!(
        std::fs::read(straight.join("loss.csv")).unwrap(),
        std::fs::read(resumed.join("loss.csv")).unwrap()
    );
}

#[test]
fn evaluate_and_interpolate_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 2);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--out", s(&run), "--config", s(&cfg), "--data", s(&data)]);
    let ckpt = run.join("checkpoint.json");

    let eval_dir = dir.path().join("eval");
    // The config file carries a model section identical to the checkpoint's.
    ok(&["evaluate", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--out", s(&eval_dir)]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(eval_dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["runs"].as_array().unwrap().len(), 2);
    assert!(report["nll"].as_f64().unwrap().is_finite());

    let id = read_dataset(data.join("test.jsonl")).unwrap()[0].id.clone();
    let trace_dir = dir.path().join("trace");
    ok(&[
        "interpolate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&trace_dir),
        "--ids",
        &id,
        "--n-cond",
        "3,10",
        "--grid",
        "11",
    ]);
    let csv = std::fs::read_to_string(trace_dir.join(format!("trace_{id}_n3.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(hetvae::eval::TRACE_HEADER));
    assert_eq!(lines.count(), 11);
    assert!(trace_dir.join(format!("trace_{id}_n10.csv")).exists());

    let bad = hetvae(&[
        "interpolate",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--checkpoint",
        s(&ckpt),
        "--out",
        s(&trace_dir),
        "--ids",
        "nope",
        "--force",
    ]);
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains(&id));
}

#[test]
fn evaluate_rejects_a_different_model_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 0);
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    let mut other: Value = serde_json::from_str(&std::fs::read_to_string(&cfg).unwrap()).unwrap();
    other["model"]["latent_dim"] = json!(5);
    let other_path = dir.path().join("other.json");
    std::fs::write(&other_path, other.to_string()).unwrap();
    let out = hetvae(&[
        "evaluate",
        "--config",
        s(&other_path),
        "--data",
        s(&data),
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--out",
        s(&dir.path().join("eval")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ablate_names_are_checked_and_empty_runs_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 1);
    let data = dir.path().join("data");
    ok(&["generate", "--config", s(&cfg), "--out", s(&data)]);

    let bad = hetvae(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&dir.path().join("a")), "--names", "-FOO"]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("-HET-ALO"));

    let empty = dir.path().join("empty");
    ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&empty), "--names", ""]);
    let csv = std::fs::read_to_string(empty.join("ablation.csv")).unwrap();
    assert_eq!(csv.trim(), hetvae::cli::ABLATION_HEADER);

    let two = dir.path().join("two");
    ok(&["ablate", "--config", s(&cfg), "--data", s(&data), "--out", s(&two), "--names", "full,-HET-ALO"]);
    let csv = std::fs::read_to_string(two.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(two.join("het-alo").join("checkpoint.json").exists());
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = hetvae(&[
        "train",
        "--data",
        s(&dir.path().join("absent")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}
