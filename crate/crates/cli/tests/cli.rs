use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn expertadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_expertadapt")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_string()
}

const TINY: &str = r#"{
    "data": {"synth": {"n_cases": 8}, "n_train": 5},
    "new_experts": [6],
    "pretrain_experts": [1, 2],
    "expert_counts": [0, 2],
    "finetune_samples": 2,
    "n_ways": 2,
    "train": {"train_steps": 2, "finetune_steps": 2, "batch_size": 1, "augment": null}
}"#;

#[test]
fn gen_data_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let res = expertadapt(&["gen-data", "--out", out.to_str().unwrap(), "--cases", "3", "--size", "64x64", "--seed", "4"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("case_001").is_dir() || fs::read_dir(&out).unwrap().count() > 1);

    // a second generation with the same seed is identical on disk
    let again = dir.path().join("again");
    expertadapt(&["gen-data", "--out", again.to_str().unwrap(), "--cases", "3", "--size", "64x64", "--seed", "4"]);
    let mut names: Vec<_> = walk(&out);
    names.sort();
    for rel in names {
        assert_eq!(fs::read(out.join(&rel)).unwrap(), fs::read(again.join(&rel)).unwrap(), "{rel}");
    }
}

fn walk(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(root).unwrap().flatten() {
        let p = e.path();
        if p.is_dir() {
            out.extend(walk(&p).into_iter().map(|s| format!("{}/{s}", e.file_name().to_string_lossy())));
        } else {
            out.push(e.file_name().to_string_lossy().into_owned());
        }
    }
    out
}

#[test]
fn bad_size_and_config_keys_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let res = expertadapt(&["gen-data", "--out", dir.path().to_str().unwrap(), "--size", "64by64"]);
    assert_eq!(code(&res), 2);
    let cfg = write(&dir.path().join("bad.json"), r#"{"trian": {}}"#);
    let res = expertadapt(&["experiment", "ann-count", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&res), 2);
    assert!(String::from_utf8_lossy(&res.stderr).contains("trian"));
    let cfg = write(&dir.path().join("counts.json"), r#"{"annotation_counts": [50]}"#);
    let res = expertadapt(&["experiment", "ann-count", "--config", &cfg]);
    assert_eq!(code(&res), 2);
    let cfg = write(&dir.path().join("kind.json"), r#"{"kind": "expert_matrix"}"#);
    let res = expertadapt(&["experiment", "ann-count", "--config", &cfg]);
    assert_eq!(code(&res), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let res = expertadapt(&["train", "--data", &format!("{out}/nowhere"), "--out", out]);
    assert_eq!(code(&res), 3, "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn experiment_then_report_render_the_same_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("tiny.json"), TINY);
    let out = dir.path().join("results");
    let res = expertadapt(&["experiment", "expert-count", "--config", &cfg, "--out", out.to_str().unwrap(), "-q"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let table = String::from_utf8(res.stdout).unwrap();
    assert!(table.contains("### Adapt to Exp_6"), "{table}");
    for f in ["config.json", "table.md", "table.csv", "table.json"] {
        assert!(out.join("expert-count").join(f).is_file(), "{f}");
    }
    let rep = expertadapt(&["report", "expert-count", "--out", out.to_str().unwrap()]);
    assert_eq!(String::from_utf8(rep.stdout).unwrap(), table);
    let csv = expertadapt(&["report", "expert-count", "--out", out.to_str().unwrap(), "--format", "csv"]);
    assert!(String::from_utf8(csv.stdout).unwrap().starts_with("table,# Experts,"));

    let resumed = expertadapt(&["experiment", "expert-count", "--config", &cfg, "--out", out.to_str().unwrap(), "--resume"]);
    assert_eq!(String::from_utf8(resumed.stdout).unwrap(), table);
    assert!(String::from_utf8_lossy(&resumed.stderr).contains("reused"));
}

#[test]
fn train_finetune_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(&dir.path().join("tiny.json"), TINY);
    let out = dir.path().to_str().unwrap();
    let res = expertadapt(&["train", "--config", &cfg, "--out", out, "--experts", "1,2", "--seed", "3", "-q"]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let ckpt = dir.path().join("model.ckpt");
    assert!(ckpt.is_file() && dir.path().join("loss.jsonl").is_file());
    let again = expertadapt(&["train", "--config", &cfg, "--out", out, "--experts", "1,2", "--seed", "3", "--resume"]);
    assert!(String::from_utf8_lossy(&again.stdout).contains("up to date"));

    let res = expertadapt(&[
        "finetune", "--config", &cfg, "--out", out, "--checkpoint", ckpt.to_str().unwrap(), "--expert", "6",
        "--samples", "2", "--way", "2", "-q",
    ]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let tuned = dir.path().join("finetuned.ckpt");
    let res = expertadapt(&["eval", "--config", &cfg, "--checkpoint", tuned.to_str().unwrap(), "--expert", "6", "--out", out]);
    assert_eq!(code(&res), 0, "{}", String::from_utf8_lossy(&res.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(summary["n_cases"], 3);
    assert!(dir.path().join("eval.json").is_file());

    let res = expertadapt(&["eval", "--config", &cfg, "--checkpoint", ckpt.to_str().unwrap(), "--expert", "6"]);
    assert_eq!(code(&res), 3);
}
