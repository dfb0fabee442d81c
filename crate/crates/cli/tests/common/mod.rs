//! Helpers shared by the CLI test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use clic_core::fusion::FeatureMap;
use serde_json::Value;

pub fn clic(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clic"))
        .args(args)
        .current_dir(dir)
        .env_remove("CLIC_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

pub fn ok(dir: &Path, args: &[&str]) -> String {
    let out = clic(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

pub fn synth(dir: &Path, count: &str) {
    ok(dir, &["synth", "--out-dir", "corpus", "--count", count, "--size", "32"]);
}

pub const TRAIN: &[&str] = &[
    "train", "--manifest", "corpus/manifest.jsonl", "--out-dir", "run", "--epochs", "2",
    "--batch-size", "4", "--queue-size", "8",
];

/// Every subcommand, in pipeline order.
pub fn pipeline(dir: &Path) {
    synth(dir, "12");
    ok(dir, &["score", "--manifest", "corpus/manifest.jsonl", "--scorer", "edge", "--out", "scores/edge.jsonl"]);
    ok(dir, &["expand", "--manifest", "corpus/manifest.jsonl", "--c", "2", "--out-dir", "expanded", "--keep-originals"]);
    ok(dir, TRAIN);
    ok(dir, &["finetune", "--manifest", "corpus/manifest.jsonl", "--encoder", "run/encoder.clic", "--out", "head.json", "--batch-size", "4", "--epochs", "3"]);
    ok(dir, &["eval", "--manifest", "corpus/manifest.jsonl", "--encoder", "run/encoder.clic", "--head", "head.json", "--out", "eval.json"]);
    ok(dir, &["icd", "--manifest", "corpus/manifest.jsonl", "--scorer", "compress", "--bins", "8", "--out-dir", "icd"]);
    ok(dir, &["stratify", "--manifest", "scores/edge.jsonl", "--out-dir", "strata"]);
    ok(dir, &["fewshot", "--manifest", "corpus/manifest.jsonl", "--encoder", "run/encoder.clic", "--ns", "2,4", "--eval-size", "6", "--batch-size", "2", "--epochs", "2", "--out-dir", "fewshot"]);
    let task = FeatureMap::new(2, 3, 3, (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    task.save(&dir.join("task.clic")).unwrap();
    FeatureMap::filled(5, 2, 2, 0.25).unwrap().save(&dir.join("ic.clic")).unwrap();
    ok(dir, &["fuse-demo", "--task", "task.clic", "--ic", "ic.clic", "--out", "fused.clic"]);
}

pub fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

