mod common;

use std::sync::OnceLock;

use common::{mvq, ok, s, tiny_run, write_config};
use mvq_cli::artifacts::{parse_motion, verify_echo};
use tempfile::TempDir;

/// One tiny trained run shared by the read-only tests below.
fn shared() -> &'static (TempDir, std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    static RUN: OnceLock<(TempDir, std::path::PathBuf, std::path::PathBuf, std::path::PathBuf)> = OnceLock::new();
    RUN.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let (cfg, data, ck) = tiny_run(dir.path());
        (dir, cfg, data, ck)
    })
}

fn body(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let out = mvq(&["gen-data"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--out"));
    assert_eq!(mvq(&["train", "nonsense", "--out", "x", "--data", "y"]).status.code(), Some(2));
}

#[test]
fn training_out_of_order_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let ck = dir.path().join("ck");
    let out = mvq(&["train", "masked", "--config", s(&cfg), "--out", s(&ck), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("rvq"), "{err}");

    let out = mvq(&["train", "rvq", "--config", s(&cfg), "--out", s(&ck), "--data", s(&dir.path().join("nowhere"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("dataset"));
}

#[test]
fn zero_steps_still_writes_a_loadable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let data = dir.path().join("data");
    let ck = dir.path().join("ck");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&["train", "rvq", "--config", s(&cfg), "--out", s(&ck), "--data", s(&data), "--steps", "0"]);
    let (_, bundle) = mvq_cli::checkpoint::load_tokenizer(&ck.join("rvq.mvqc")).unwrap();
    assert_eq!(bundle.step, 0);
    ok(&["train", "masked", "--config", s(&cfg), "--out", s(&ck), "--data", s(&data), "--steps", "0"]);
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[rvq]\nlayerz = 3\n").unwrap();
    let out = mvq(&["gen-data", "--config", s(&bad), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("layerz"));
}

#[test]
fn generate_length_sets_the_frame_count() {
    let (dir, cfg, data, ck) = shared();
    let out = dir.path().join("gen/len40.txt");
    ok(&[
        "generate", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--index", "2", "--length", "40",
        "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(verify_echo(&text).unwrap());
    assert_eq!(parse_motion(&text).unwrap().len(), 160);
}

#[test]
fn greedy_generation_is_seed_independent() {
    let (dir, cfg, data, ck) = shared();
    let run = |seed: &str| {
        let out = dir.path().join(format!("gen/greedy-{seed}.txt"));
        ok(&[
            "generate", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--index", "1", "--greedy",
            "--seed", seed, "--out", s(&out),
        ]);
        std::fs::read_to_string(&out).unwrap()
    };
    let (a, b) = (run("1"), run("2"));
    assert_eq!(body(&a), body(&b));
    assert_ne!(a, b, "the echoed seed differs");
}

#[test]
fn cascaded_generation_writes_the_same_schema() {
    let (dir, cfg, data, ck) = shared();
    let out = dir.path().join("gen/cascaded.txt");
    ok(&[
        "generate", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--index", "0", "--cascaded",
        "--length", "6", "--out", s(&out),
    ]);
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(verify_echo(&text).unwrap());
    assert_eq!(parse_motion(&text).unwrap().len(), 24);
}

#[test]
fn feature_files_require_a_length() {
    let (dir, cfg, _, ck) = shared();
    let feats = dir.path().join("feats.txt");
    let frame = vec!["0.1"; 32].join(" ");
    std::fs::write(&feats, format!("{}\n", vec![frame; 45].join("\n"))).unwrap();
    let out = dir.path().join("gen/from-features.txt");
    let args = ["generate", "--config", s(cfg), "--checkpoints", s(ck), "--features", s(&feats), "--out", s(&out)];
    assert_eq!(mvq(&args).status.code(), Some(1));
    let mut with_len = args.to_vec();
    with_len.extend(["--length", "5"]);
    ok(&with_len);
    assert_eq!(parse_motion(&std::fs::read_to_string(&out).unwrap()).unwrap().len(), 20);
}

#[test]
fn evaluate_writes_reports_and_fails_acceptance_on_an_untrained_model() {
    let (dir, cfg, data, ck) = shared();
    let out = dir.path().join("eval");
    ok(&["evaluate", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--out", s(&out)]);
    let text = std::fs::read_to_string(out.join("metrics.txt")).unwrap();
    assert!(verify_echo(&text).unwrap());
    assert!(text.contains("oracle_accuracy="));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(json["summary"]["fid"]["mean"].is_number());

    let strict = mvq(&[
        "evaluate", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--out", s(&out),
        "--assert-acceptance",
    ]);
    assert_eq!(strict.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&strict.stderr).contains("criterion 7"));
}

#[test]
fn ground_truth_evaluation_needs_only_the_evaluator() {
    let (dir, cfg, data, ck) = shared();
    let only = dir.path().join("only-eval");
    std::fs::create_dir_all(&only).unwrap();
    std::fs::copy(ck.join("evaluator.mvqc"), only.join("evaluator.mvqc")).unwrap();
    let out = dir.path().join("eval-gt");
    ok(&[
        "evaluate", "--config", s(cfg), "--checkpoints", s(&only), "--data", s(data), "--out", s(&out),
        "--ground-truth",
    ]);
    assert!(!std::fs::read_to_string(out.join("metrics.txt")).unwrap().contains("oracle_accuracy"));
}

#[test]
fn bench_reports_both_pipelines() {
    let (dir, cfg, data, ck) = shared();
    let out = dir.path().join("bench");
    ok(&[
        "bench", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--out", s(&out), "--runs", "2",
    ]);
    let text = std::fs::read_to_string(out.join("throughput.txt")).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("pipeline=end2end")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.starts_with("pipeline=cascaded")).count(), 2);
    assert_eq!(text.lines().filter(|l| l.contains("ratio_end2end_over_cascaded=")).count(), 2);
}

#[test]
fn ablation_accepts_a_kind_list_and_skips_the_assertion_off_seed() {
    let (dir, cfg, data, ck) = shared();
    let out = dir.path().join("ablation");
    let o = ok(&[
        "ablation", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--out", s(&out), "--kinds",
        "mem_retr,avgpool8", "--seed", "5", "--assert-acceptance",
    ]);
    assert!(String::from_utf8_lossy(&o.stdout).contains("skipped"));
    let table = std::fs::read_to_string(out.join("ablation.md")).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("| ")).count(), 3);
    let bad = mvq(&[
        "ablation", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--out", s(&out), "--kinds",
        "nope",
    ]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn plot_data_is_emitted_on_request() {
    let (dir, cfg, data, ck) = shared();
    let out = dir.path().join("gen/plot.txt");
    ok(&[
        "generate", "--config", s(cfg), "--checkpoints", s(ck), "--data", s(data), "--out", s(&out),
        "--emit-plot-data",
    ]);
    assert!(dir.path().join("gen/plot.trajectory.txt").exists());
}
