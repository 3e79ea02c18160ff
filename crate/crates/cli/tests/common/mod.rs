#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const SMOKE: &str = r#"
seed = 1

[planted]
vocab_size = 30
n_train = 32
n_val = 8
n_test = 16

[model]
d_model = 8
heads = 2
layers = 1
d_ff = 16
max_seq_len = 64

[train]
batch_size = 8
max_epochs = 1
evals_per_epoch = 1
pretrain_epochs = 1

[train.optimizer]
lr = 1e-3
accumulation_window = 1

[eval]
curve_grid = [0, 50, 100]

[sweep]
lambda_su = [1.0]
lambda_su1 = [0.0, 4.0]
sentence = [false, true]
importance = [false]
selective = [false]
lambda_sp = [0.25]
workers = 2

[ingest]
documents = "docs.jsonl"
annotations = "ann.jsonl"
labels = ["neg", "pos"]
split = [0.5, 0.25, 0.25]
"#;

pub fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rationale"))
}

pub fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write_fixture(dir: &Path) -> PathBuf {
    let mut docs = String::new();
    let mut ann = String::new();
    for i in 0..12 {
        let good = i % 2 == 0;
        let word = if good { "great" } else { "awful" };
        docs.push_str(&format!(
            "{{\"docid\": \"d{i}\", \"text\": \"the film was {word}\\nsome other words here\"}}\n"
        ));
        ann.push_str(&format!(
            "{{\"annotation_id\": \"a{i}\", \"classification\": \"{}\", \"query\": \"is it good\", \
             \"evidences\": [[{{\"docid\": \"d{i}\", \"start_token\": 3, \"end_token\": 4}}]]}}\n",
            if good { "pos" } else { "neg" }
        ));
    }
    fs::write(dir.join("docs.jsonl"), docs).unwrap();
    fs::write(dir.join("ann.jsonl"), ann).unwrap();
    let cfg = dir.join("smoke.toml");
    fs::write(&cfg, SMOKE).unwrap();
    cfg
}

pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

/// Runs `args` (with `--out` appended) into two fresh directories and compares every file.
pub fn assert_rerun_identical(
    root: &Path,
    verb: &str,
    args: &[&str],
    prepare: impl Fn(&Path),
) -> PathBuf {
    let mut snaps = Vec::new();
    for k in 0..2 {
        let out = root.join(format!("{verb}_{k}"));
        prepare(&out);
        let mut full: Vec<&str> = args.to_vec();
        let out_s = out.to_str().unwrap().to_string();
        full.extend(["--out", &out_s]);
        run(&full);
        snaps.push(snapshot(&out));
    }
    assert!(!snaps[0].is_empty(), "{verb} wrote nothing");
    assert_eq!(
        snaps[0].keys().collect::<Vec<_>>(),
        snaps[1].keys().collect::<Vec<_>>(),
        "{verb}: file sets differ"
    );
    for (name, bytes) in &snaps[0] {
        assert!(
            bytes == &snaps[1][name],
            "{verb}: {} differs between reruns",
            name.display()
        );
    }
    root.join(format!("{verb}_0"))
}
