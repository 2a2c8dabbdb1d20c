#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

/// A configuration small enough to run every command in seconds.
pub const TINY: &str = r#"
[data]
train = 48
test = 40

[rvq]
layers = 2
codebook_size = 16
latent_dim = 8
width = 8
steps = 4
batch = 4
window = 16
warmup = 2

[conditioner]
memory_tokens = 4
memory_dim = 8
cond_dim = 8

[masked]
layers = 1
heads = 2
model_dim = 16
ffn_dim = 32
steps = 3
batch = 4
warmup = 1

[residual]
layers = 1
heads = 2
model_dim = 16
ffn_dim = 32
steps = 3
batch = 4
warmup = 1

[pipeline]
iterations = 3

[eval]
embed_dim = 4
hidden = 8
steps = 3
batch = 8
warmup = 1
samples = 12
r_pool = 4
diversity_pairs = 6
mm_conditions = 2
mm_repeats = 2
repeats = 1
bench_samples = 3
bench_warmup = 1
bench_length = 4
recognizer_steps = 2
text_steps = 2
ablation_masked_steps = 2
ablation_residual_steps = 2
"#;

pub fn mvq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvq"))
        .args(args)
        .env_remove("MVQ_SEED")
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) -> Output {
    let out = mvq(args);
    assert!(
        out.status.success(),
        "mvq {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Data and every checkpoint under `root/data` and `root/ck`.
pub fn tiny_run(root: &Path) -> (PathBuf, PathBuf, PathBuf) {
    let cfg = write_config(root);
    let data = root.join("data");
    let ck = root.join("ck");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    for c in ["rvq", "conditioner-joint", "evaluator", "recognizer"] {
        ok(&["train", c, "--config", s(&cfg), "--out", s(&ck), "--data", s(&data)]);
    }
    (cfg, data, ck)
}
