use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use revhrnet::netpbm;

fn revhrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revhrnet")).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small corpus plus a config next to it.
fn setup(dir: &Path, config: &str) -> PathBuf {
    let out = revhrnet(&["generate", "--seed", "3", "--count", "4", "--size", "32", "--classes", "3", "--out", s(&dir.join("corpus"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let path = dir.join("run.json");
    std::fs::write(&path, config).unwrap();
    path
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = setup(dir, r#"{"dataset": "corpus", "train": {"steps": 1, "batch_size": 2}}"#);
    let out = revhrnet(&["train", "--config", s(&cfg), "--out", s(&dir.join("run"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    dir.join("run/model.ckpt")
}

#[test]
fn generate_validates_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let bad = revhrnet(&["generate", "--count", "8", "--size", "60", "--classes", "3", "--out", s(&dir.path().join("x"))]);
    assert_eq!(bad.status.code(), Some(2));
    assert!(stderr(&bad).contains("32"), "{}", stderr(&bad));
    assert!(!dir.path().join("x").exists());

    let mut corpora = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let r = revhrnet(&["generate", "--seed", "7", "--count", "8", "--size", "64", "--classes", "3", "--out", s(&out)]);
        assert!(r.status.success());
        let mut files = Vec::new();
        for split in ["images", "labels"] {
            for e in std::fs::read_dir(out.join("train").join(split)).unwrap() {
                let p = e.unwrap().path();
                files.push((p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap()));
            }
        }
        files.sort();
        assert_eq!(files.len(), 16);
        corpora.push((files, std::fs::read(out.join("manifest.json")).unwrap()));
    }
    assert_eq!(corpora[0], corpora[1]);
}

#[test]
fn config_errors_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let missing = revhrnet(&["train", "--config", s(&dir.path().join("nope.json")), "--out", s(&dir.path().join("o"))]);
    assert_eq!(missing.status.code(), Some(2));
    for bad in [
        r#"{"dataset": "corpus", "colour": 1}"#,
        r#"{"dataset": "corpus", "train": {"steps": 0}}"#,
        r#"{"dataset": "corpus", "model": {"stream_widths": [48, 96]}}"#,
        r#"{"dataset": "corpus", "model": {"variant_extra_stream": true, "blocks_per_stage": [2, 2, 2, 2, 2]}}"#,
        r#"{"dataset": "corpus", "train": {"checkpoint_path": "x.ckpt"}}"#,
    ] {
        let cfg = setup(dir.path(), bad);
        let out = revhrnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
        assert_eq!(out.status.code(), Some(2), "{bad}: {}", stderr(&out));
        assert!(!dir.path().join("o").exists(), "{bad} touched the output");
    }
}

#[test]
fn variant_config_logs_five_streams() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), r#"{"dataset": "corpus", "model": {"variant_extra_stream": true}, "train": {"steps": 1, "batch_size": 2}}"#);
    let out = revhrnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("v"))]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(dir.path().join("v/train.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["streams"], 5);
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), r#"{"dataset": "corpus", "train": {"steps": 5, "batch_size": 2}}"#);
    let out = revhrnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--steps", "2", "--seed", "4"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let log = std::fs::read_to_string(dir.path().join("o/train.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["seed"], 4);
}

#[test]
fn eval_rejects_foreign_checkpoint_without_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let ok = revhrnet(&["eval", "--config", s(&dir.path().join("run.json")), "--checkpoint", s(&ckpt), "--split", "train"]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert!(report["pixel_accuracy"].as_f64().unwrap() <= 1.0);

    let other = dir.path().join("variant.json");
    std::fs::write(&other, r#"{"dataset": "corpus", "model": {"variant_extra_stream": true}}"#).unwrap();
    let out = revhrnet(&["eval", "--config", s(&other), "--checkpoint", s(&ckpt), "--split", "train"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(out.stdout.is_empty());

    let empty = revhrnet(&["eval", "--config", s(&dir.path().join("run.json")), "--checkpoint", s(&ckpt)]);
    assert_eq!(empty.status.code(), Some(2), "val split is empty: {}", stderr(&empty));
}

#[test]
fn divergence_exits_with_numeric_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path(), r#"{"dataset": "corpus", "train": {"steps": 10, "batch_size": 2, "learning_rate": 1.0, "momentum": 0.0, "eval_every": 1}}"#);
    let out = revhrnet(&["train", "--config", s(&cfg), "--out", s(&dir.path().join("o"))]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    assert!(stderr(&out).contains("non-finite"));
    assert!(dir.path().join("o/model.ckpt").exists());
}

#[test]
fn prediction_crops_padding_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let (w, h) = (100, 80);
    let rgb: Vec<u8> = (0..w * h * 3).map(|i| ((i * 7) % 256) as u8).collect();
    let image = dir.path().join("odd.ppm");
    netpbm::write_ppm(&image, w, h, &rgb).unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let pgm = dir.path().join(format!("{name}.pgm"));
        let ppm = dir.path().join(format!("{name}.ppm"));
        let out = revhrnet(&["predict", "--checkpoint", s(&ckpt), "--image", s(&image), "--out", s(&pgm), "--color", s(&ppm)]);
        assert!(out.status.success(), "{}", stderr(&out));
        let labels = netpbm::read(&pgm).unwrap();
        assert_eq!((labels.width, labels.height, labels.channels), (w, h, 1));
        assert!(labels.data.iter().all(|&v| v < 3));
        let color = netpbm::read(&ppm).unwrap();
        assert_eq!((color.width, color.height, color.channels), (w, h, 3));
        outputs.push((std::fs::read(&pgm).unwrap(), std::fs::read(&ppm).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn analyze_reports_and_compares() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("desk.json");
    std::fs::write(&a, r#"{"model": {"num_classes": 11}}"#).unwrap();
    let b = dir.path().join("variant.json");
    std::fs::write(&b, r#"{"model": {"num_classes": 11, "variant_extra_stream": true}}"#).unwrap();

    let table = revhrnet(&["analyze", "--config", s(&a)]);
    assert!(table.status.success(), "{}", stderr(&table));
    assert!(String::from_utf8_lossy(&table.stdout).contains("decoder.head"));

    let same = revhrnet(&["analyze", "--config", s(&a), "--compare", s(&a), "--json"]);
    let r: serde_json::Value = serde_json::from_slice(&same.stdout).unwrap();
    for key in ["params_ratio", "macs_ratio", "activation_ratio", "training_activation_ratio", "training_memory_ratio"] {
        assert_eq!(r[key], 1.0, "{key}");
    }

    let cmp = revhrnet(&["analyze", "--config", s(&a), "--compare", s(&b), "--json", "--size", "128x64"]);
    let r: serde_json::Value = serde_json::from_slice(&cmp.stdout).unwrap();
    assert_eq!(r["name_a"], "desk");
    assert_eq!(r["name_b"], "variant");
    assert_eq!(r["input_size"], serde_json::json!([128, 64]));
    assert!(r["training_activation_ratio"].as_f64().unwrap() > 0.0);

    let bad = revhrnet(&["analyze", "--config", s(&a), "--size", "100x64"]);
    assert_eq!(bad.status.code(), Some(2));
}
