use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn qrw(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qrw"))
        .args(args)
        .env_remove("QRW_RUN_ROOT")
        .output()
        .unwrap()
}

fn stdout_json(out: &Output) -> Value {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path) {
    stdout_json(&qrw(&[
        "synth",
        "--seed",
        "4",
        "--out",
        p(dir),
        "--train-per-class",
        "30",
        "--valid-per-class",
        "30",
        "--test-per-class",
        "30",
    ]));
}

#[test]
fn score_writes_one_line_per_record() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = tmp.path().join("scores.jsonl");
    let v = stdout_json(&qrw(&["score", "--in", p(&tmp.path().join("test.jsonl")), "--out", p(&out)]));
    assert_eq!(v["records"], 90);
    let lines: Vec<Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 90);
    assert!(lines.iter().all(|l| (0.0..=1.0).contains(&l["z"].as_f64().unwrap())));
}

#[test]
fn partition_summarizes_labels_and_proportions() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let v = stdout_json(&qrw(&["partition", "--in", p(&tmp.path().join("train.jsonl")), "--scheme", "table3"]));
    assert_eq!(v["labels"], serde_json::json!(["hard", "medium", "easy"]));
    assert_eq!(v["sizes"], serde_json::json!([30, 30, 30]));
}

#[test]
fn unknown_flags_exit_with_usage() {
    let out = qrw(&["score", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn failures_report_json_on_stderr() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qrw(&["score", "--in", p(&tmp.path().join("missing.jsonl")), "--out", p(&tmp.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].as_str().unwrap().contains("missing.jsonl"));

    let out = qrw(&["partition", "--in", p(&tmp.path().join("missing.jsonl")), "--scheme", "nope"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn convert_canard_writes_the_corpus_format() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("canard.json");
    std::fs::write(
        &src,
        r#"[{"History": ["Robert Fripp", "King Crimson"], "QuAC_dialog_id": "C_1",
             "Question": "Did he win any awards?", "Question_no": 1,
             "Rewrite": "Did Robert Fripp win any awards?"}]"#,
    )
    .unwrap();
    let out = tmp.path().join("train.jsonl");
    let v = stdout_json(&qrw(&["convert-canard", "--in", p(&src), "--out", p(&out)]));
    assert_eq!((v["records"].as_u64(), v["skipped"].as_u64()), (Some(1), Some(0)));
    assert!(std::fs::read_to_string(out).unwrap().contains("\"dialogue_id\":\"C_1\""));
}

#[test]
fn pipeline_commands_share_one_run_directory() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    synth(&corpus);
    let cfg_path = tmp.path().join("cfg.json");
    let mut cfg = qrw_harness::pipeline::PipelineConfig::desk(4);
    cfg.model.d_model = 16;
    cfg.model.n_heads = 2;
    cfg.model.n_enc_layers = 1;
    cfg.model.n_dec_layers = 1;
    cfg.model.adapter_bottleneck = 4;
    for job in [&mut cfg.shared, &mut cfg.private, &mut cfg.fusion, &mut cfg.distill] {
        job.epochs = 1;
    }
    cfg.beam_width = 1;
    cfg.max_decode_len = 8;
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();

    // Relative run paths resolve against the run root.
    let run_with_root = |args: &[&str]| {
        Command::new(env!("CARGO_BIN_EXE_qrw"))
            .args(args)
            .env("QRW_RUN_ROOT", tmp.path())
            .output()
            .unwrap()
    };
    let base = ["--run", "exp1", "--corpus", p(&corpus)];
    let with_cfg = |cmd: &'static str| -> Vec<&str> {
        let mut v = vec![cmd];
        v.extend(base);
        v.extend(["--config", p(&cfg_path)]);
        v
    };
    let v = stdout_json(&run_with_root(&with_cfg("train")));
    assert_eq!(v["completed"], "private");
    let run = tmp.path().join("exp1");
    assert!(run.join("checkpoints/private-easy.ckpt").exists());
    assert!(!run.join("checkpoints/classifier.ckpt").exists());
    stdout_json(&run_with_root(&with_cfg("fuse")));
    assert!(run.join("checkpoints/classifier.ckpt").exists());
    // Later commands pick up the saved configuration.
    let mut distill = vec!["distill"];
    distill.extend(base);
    stdout_json(&run_with_root(&distill));
    assert!(run.join("checkpoints/student.ckpt").exists());
    let mut eval = vec!["eval"];
    eval.extend(base);
    let v = stdout_json(&run_with_root(&eval));
    assert!(v["report"].is_string());

    let v = stdout_json(&qrw(&["report", "--run", p(&run)]));
    assert_eq!(v["systems"], 9);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert!(report["heatmap"]["matrix"].is_array());
}
