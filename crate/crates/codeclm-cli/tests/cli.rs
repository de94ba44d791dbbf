use std::path::Path;
use std::process::Command;

use codeclm::toyworld::{instoken, read_records};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_codeclm"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.output().expect("spawn codeclm");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn gen_data(dir: &Path, name: &str, phase: &str, count: usize, seed: u64) -> std::path::PathBuf {
    let out = dir.join(name);
    run_ok(bin().args([
        "gen-data",
        "--count",
        &count.to_string(),
        "--phase",
        phase,
        "--seed",
        &seed.to_string(),
        "--out",
        out.to_str().unwrap(),
    ]));
    out
}

fn train_tiny(dir: &Path, dataset: &Path, out_dir: &Path, extra: &str) -> std::path::PathBuf {
    let config = format!(
        r#"
phase = "instruct"
dataset = "{}"
out_dir = "{}"
ar_steps = 100
nar_steps = 100
batch_size = 4
peak_lr = 1e-3
warmup = 10
seed = 1
model = "tiny"
{extra}
"#,
        dataset.display(),
        out_dir.display()
    );
    let config_path = dir.join("train.toml");
    std::fs::write(&config_path, config).unwrap();
    run_ok(bin().args(["train", config_path.to_str().unwrap()]));
    out_dir.join("checkpoint")
}

#[test]
fn gen_data_is_deterministic_and_counts_lines() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_data(dir.path(), "a.jsonl", "instruct", 50, 3);
    let b = gen_data(dir.path(), "b.jsonl", "instruct", 50, 3);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(read_records(&a).unwrap().len(), 50);
}

#[test]
fn pretrain_data_has_no_attribute_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let path = gen_data(dir.path(), "pre.jsonl", "pretrain", 40, 0);
    for record in read_records(&path).unwrap() {
        assert!(!record.tokens.iter().any(|&t| instoken::is_attribute(t)));
    }
}

#[test]
fn train_sample_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "train.jsonl", "instruct", 16, 7);
    let run_dir = dir.path().join("run");
    let ckpt = train_tiny(dir.path(), &data, &run_dir, "");

    // Metrics: one row per network at step 100, plus the header.
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines[0], "step,phase,network,loss,lr");
    assert_eq!(lines.len(), 3, "unexpected metrics: {metrics}");

    // Sampling with CFG defaults (2/2/2) writes a grid that parses back.
    let grid_path = dir.path().join("out.jsonl");
    let report_path = dir.path().join("report.json");
    run_ok(bin().args([
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--instruction-file",
        data.to_str().unwrap(),
        "--line",
        "2",
        "--max-frames",
        "24",
        "--out",
        grid_path.to_str().unwrap(),
        "--report",
        report_path.to_str().unwrap(),
    ]));
    let out_records = read_records(&grid_path).unwrap();
    assert_eq!(out_records.len(), 1);
    assert_eq!(out_records[0].grid.len(), out_records[0].grid_frames * out_records[0].grid_layers);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report["guidance"]["gamma"], 2.0);
    assert_eq!(report["guidance"]["alpha"], 2.0);
    assert_eq!(report["guidance"]["beta"], 2.0);

    // Guidance disabled runs the pure-conditional path.
    run_ok(bin().args([
        "sample",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--instruction-file",
        data.to_str().unwrap(),
        "--gamma",
        "1",
        "--alpha",
        "1",
        "--beta",
        "1",
        "--max-frames",
        "24",
        "--out",
        dir.path().join("nocfg.jsonl").to_str().unwrap(),
        "--report",
        dir.path().join("nocfg.json").to_str().unwrap(),
    ]));

    // The sweep emits the four ablation rows.
    let eval_out = dir.path().join("eval.json");
    run_ok(bin().args([
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--eval-set",
        data.to_str().unwrap(),
        "--sweep",
        "--max-frames",
        "24",
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    let reports: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    let rows = reports.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0]["guidance"]["gamma"], 1.0);
    assert_eq!(rows[1]["guidance"]["gamma"], 2.0);
    assert_eq!(rows[2]["guidance"]["alpha"], 2.0);
    assert_eq!(rows[3]["guidance"]["beta"], 2.0);
    for row in rows {
        assert!(row["toy_wer"].as_f64().unwrap() >= 0.0);
        assert!(row["attr_accuracy"]["mean"].as_f64().unwrap() <= 1.0);
    }
}

#[test]
fn init_hand_off_between_phases() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "train.jsonl", "instruct", 8, 11);
    let run1 = dir.path().join("run1");
    let ckpt = train_tiny(dir.path(), &data, &run1, "");

    let stress_data = gen_data(dir.path(), "stress.jsonl", "stress", 8, 12);
    let config = format!(
        r#"
phase = "stress"
dataset = "{}"
out_dir = "{}"
ar_steps = 20
nar_steps = 20
batch_size = 2
peak_lr = 1e-3
warmup = 5
seed = 2
"#,
        stress_data.display(),
        dir.path().join("run2").display()
    );
    let config_path = dir.path().join("stress.toml");
    std::fs::write(&config_path, config).unwrap();
    run_ok(bin().args([
        "train",
        config_path.to_str().unwrap(),
        "--init",
        ckpt.to_str().unwrap(),
    ]));
    assert!(dir.path().join("run2/checkpoint/header.json").exists());
}

#[test]
fn usage_errors_exit_one() {
    let out = bin().args(["gen-data", "--nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["train"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_two_with_error_line() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_data(dir.path(), "d.jsonl", "instruct", 4, 0);
    let out = bin()
        .args([
            "sample",
            "--checkpoint",
            dir.path().join("missing").to_str().unwrap(),
            "--instruction-file",
            data.to_str().unwrap(),
            "--out",
            dir.path().join("x.jsonl").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.starts_with("error: "), "stderr: {stderr}");
}

#[test]
fn config_errors_report_location() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("bad.toml");
    std::fs::write(&config_path, "phase = \"instruct\"\nunknown_key = 3\n").unwrap();
    let out = bin().args(["train", config_path.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown_key") || stderr.contains("line"), "stderr: {stderr}");
}
