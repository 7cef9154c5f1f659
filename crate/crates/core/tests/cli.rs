use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn refocus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_refocus")).args(args).output().unwrap()
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn train_args<'a>(data: &'a str, out: &'a str, workers: &'a str) -> Vec<&'a str> {
    vec![
        "train", "--T", "20", "--d-in", "6", "--d-q", "3", "--n-needle", "2", "--data", data, "--steps", "4",
        "--batch-size", "4", "--N", "4", "--t-prime", "3", "--workers", workers, "--out-dir", out,
    ]
}

#[test]
fn usage_and_validation_errors_exit_with_1() {
    assert_eq!(refocus(&["gen", "--bogus"]).status.code(), Some(1));
    assert_eq!(refocus(&["no-such-command"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.jsonl");
    let o = refocus(&["gen", "--n-needle", "0", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn runtime_failures_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("missing.jsonl");
    let o = refocus(&[
        "filter",
        "--in",
        missing.to_str().unwrap(),
        "--out-dir",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_exits_with_0() {
    let o = refocus(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stdout).contains("train"));
}

#[test]
fn manifest_lists_every_output_with_its_digest() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let o = refocus(&["gen", "--T", "20", "--d-in", "6", "--d-q", "3", "--n", "8", "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("train");
    let o = refocus(&train_args(data.to_str().unwrap(), out.to_str().unwrap(), "1"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    let files = manifest["outputs"].as_array().expect("outputs array");
    assert!(!files.is_empty());
    for f in files {
        let path = out.join(f["path"].as_str().unwrap());
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
        assert_eq!(f["sha256"].as_str().unwrap(), hex::encode(Sha256::digest(&bytes)));
    }
    assert!(out.join("resolved-config.json").exists());
    assert!(out.join("metrics.jsonl").exists());
    assert!(out.join("checkpoints/final.json").exists());
}

#[test]
fn worker_count_does_not_change_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let o = refocus(&["gen", "--T", "20", "--d-in", "6", "--d-q", "3", "--n", "8", "--out", data.to_str().unwrap()]);
    assert!(o.status.success());
    let one = dir.path().join("w1");
    let three = dir.path().join("w3");
    assert!(refocus(&train_args(data.to_str().unwrap(), one.to_str().unwrap(), "1")).status.success());
    assert!(refocus(&train_args(data.to_str().unwrap(), three.to_str().unwrap(), "3")).status.success());
    let a = read_tree(&one);
    let b = read_tree(&three);
    for name in ["metrics.jsonl", "checkpoints/final.bin", "reports/train-summary.json"] {
        assert_eq!(a[name], b[name], "{name} differs between worker counts");
    }
}

#[test]
fn subcommands_leave_their_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.jsonl");
    let d = data.to_str().unwrap();
    assert!(refocus(&["gen", "--T", "20", "--d-in", "6", "--d-q", "3", "--n", "8", "--out", d]).status.success());
    let train_dir = dir.path().join("train");
    assert!(refocus(&train_args(d, train_dir.to_str().unwrap(), "1")).status.success());
    let ckpt = train_dir.join("checkpoints/final.json");
    let c = ckpt.to_str().unwrap();
    let before = (std::fs::read(&data).unwrap(), read_tree(&train_dir.join("checkpoints")));

    let kept = dir.path().join("filter/kept.jsonl");
    let runs: Vec<Vec<&str>> = vec![
        vec!["filter", "--in", d, "--out", kept.to_str().unwrap()],
        vec!["analyze", "--checkpoint", c, "--data", d, "--t-prime", "3", "--n-runs", "2", "--out-dir"],
        vec!["bins", "--checkpoint", c, "--data", d, "--t-prime", "3", "--n-runs", "2", "--subsets-per-bin", "2", "--out-dir"],
        vec!["train", "--data", d, "--init", c, "--steps", "2", "--batch-size", "2", "--N", "2", "--t-prime", "2", "--out-dir"],
    ];
    for (i, mut args) in runs.into_iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let out = out.to_str().unwrap().to_string();
        if args[0] != "filter" {
            args.push(&out);
        }
        let o = refocus(&args);
        assert!(o.status.success(), "{:?}: {}", args, String::from_utf8_lossy(&o.stderr));
    }
    let after = (std::fs::read(&data).unwrap(), read_tree(&train_dir.join("checkpoints")));
    assert!(before == after, "an input file changed");
}

#[test]
fn a_resolved_config_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    let o = refocus(&[
        "train", "--T", "16", "--d-in", "5", "--d-q", "2", "--n", "6", "--seed", "11", "--steps", "3",
        "--batch-size", "2", "--N", "3", "--t-prime", "2", "--out-dir", first.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let second = dir.path().join("second");
    let cfg = first.join("resolved-config.json");
    let o = refocus(&["--config", cfg.to_str().unwrap(), "train", "--out-dir", second.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let (a, b) = (read_tree(&first), read_tree(&second));
    for name in ["metrics.jsonl", "checkpoints/final.bin", "reports/train-summary.json"] {
        assert_eq!(a[name], b[name], "{name} differs");
    }
}
