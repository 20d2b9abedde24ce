//! End-to-end exercises of the `agdn` binary: dataset synthesis and
//! ingestion, training artifacts, evaluation, determinism of summaries, and
//! the exit-code contract (0 success, 1 runtime, 2 configuration, 3 failed
//! verification).

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use agdn::data::{synth_sbm, write_mask_file, write_matrix_file, Dataset, FeatureMatrix, SbmConfig};

fn agdn_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_agdn"))
}

fn run(args: &[&str]) -> Output {
    agdn_bin().args(args).output().expect("binary launches")
}

/// `eval` with the shared model shape plus `extra` arguments.
fn run_eval(data: &str, out_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["eval", "--data", data, "--out", out_dir];
    args.extend_from_slice(&SHAPE);
    args.extend_from_slice(extra);
    run(&args)
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("stdout is UTF-8")
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("stderr is UTF-8")
}

fn assert_code(out: &Output, expected: i32) {
    assert_eq!(
        out.status.code(),
        Some(expected),
        "stdout:\n{}\nstderr:\n{}",
        stdout_str(out),
        stderr_str(out)
    );
}

/// Synthesize a small dataset directory under `dir` and return its path.
fn synth_dataset(dir: &Path) -> String {
    let data = dir.join("data").display().to_string();
    let out = run(&[
        "synth", "--nodes", "60", "--classes", "3", "--feature-dim", "4", "--seed", "7", "--out",
        &data,
    ]);
    assert_code(&out, 0);
    let echo: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    assert_eq!(echo["nodes"], 60);
    assert_eq!(echo["classes"], 3);
    data
}

/// Model-shape flags shared by `train` and `eval`: the checkpoint stores a
/// digest of the model configuration, so evaluation must replay the same
/// shape it was trained with.
const SHAPE: [&str; 6] = ["--layers", "2", "--hops", "2", "--hidden", "8"];

/// Train a small model into `out_dir` and return the parsed summary.
fn train_small(data: &str, out_dir: &str, seed: &str) -> serde_json::Value {
    let mut args = vec![
        "train", "--data", data, "--out", out_dir, "--epochs", "12", "--lr", "0.3", "--seed",
        seed,
    ];
    args.extend_from_slice(&SHAPE);
    let out = run(&args);
    assert_code(&out, 0);
    let last = stdout_str(&out);
    let last = last.lines().last().expect("summary line printed");
    serde_json::from_str(last).expect("summary is JSON")
}

#[test]
fn train_writes_checkpoint_metrics_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let out_dir = tmp.path().join("run").display().to_string();
    let summary = train_small(&data, &out_dir, "0");

    let out_path = Path::new(&out_dir);
    assert!(out_path.join("model.ckpt").exists());
    assert!(out_path.join("summary.json").exists());
    let metrics = fs::read_to_string(out_path.join("metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics
        .lines()
        .map(|l| serde_json::from_str(l).expect("each metrics line is JSON"))
        .collect();
    assert_eq!(records.len(), 12, "one record per epoch");
    assert_eq!(records[0]["epoch"], 1);
    for r in &records {
        assert!(r["train_loss"].as_f64().unwrap().is_finite());
        assert!(r["valid_acc"].as_f64().is_some());
    }

    // The stored summary matches the stdout echo except for nothing at all —
    // both come from the same serialization.
    let stored: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_path.join("summary.json")).unwrap()).unwrap();
    assert_eq!(stored, summary);
    assert!(summary["digest"].as_str().unwrap().len() == 64);
    assert!(summary["wall_time_seconds"].as_f64().unwrap() > 0.0);
}

#[test]
fn eval_reproduces_the_summary_accuracies() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let out_dir = tmp.path().join("run").display().to_string();
    let summary = train_small(&data, &out_dir, "0");

    let out = run_eval(&data, &out_dir, &["--split", "all"]);
    assert_code(&out, 0);
    let eval: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    for key in ["train_acc", "valid_acc", "test_acc"] {
        assert_eq!(eval[key], summary[key], "{key} must match the summary exactly");
    }

    let out = run_eval(&data, &out_dir, &["--split", "train"]);
    assert_code(&out, 0);
    let eval: serde_json::Value = serde_json::from_str(stdout_str(&out).trim()).unwrap();
    assert_eq!(eval["split"], "train");
    assert_eq!(eval["accuracy"], summary["train_acc"]);
}

#[test]
fn summary_digest_tracks_seed_not_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let a = train_small(&data, &tmp.path().join("a").display().to_string(), "0");
    let b = train_small(&data, &tmp.path().join("b").display().to_string(), "0");
    let c = train_small(&data, &tmp.path().join("c").display().to_string(), "1");
    assert_eq!(a["digest"], b["digest"], "same seed, different out dir: same digest");
    assert_eq!(a["test_acc"], b["test_acc"]);
    assert_ne!(a["digest"], c["digest"], "different seed: different digest");
}

#[test]
fn ingest_round_trip_matches_direct_load() {
    let tmp = tempfile::tempdir().unwrap();
    let ds = synth_sbm(&SbmConfig {
        num_nodes: 40,
        num_classes: 2,
        p_in: 0.2,
        p_out: 0.02,
        feature_dim: 3,
        feature_noise: 0.5,
        seed: 3,
    })
    .unwrap();

    // Lay the dataset out as loose files the way an external pipeline would.
    let edges_path = tmp.path().join("edges.txt");
    let mut edge_text = String::from("# src dst\n");
    for (s, d) in ds.graph.undirected_edges() {
        edge_text.push_str(&format!("{s} {d}\n"));
    }
    fs::write(&edges_path, edge_text).unwrap();
    write_matrix_file(&tmp.path().join("features.bin"), &ds.features).unwrap();
    let labels_f32: Vec<f32> = ds.labels.iter().map(|&l| l as f32).collect();
    write_matrix_file(
        &tmp.path().join("labels.bin"),
        &FeatureMatrix::new(ds.num_nodes(), 1, labels_f32).unwrap(),
    )
    .unwrap();
    let mask_dir = tmp.path().join("masks");
    fs::create_dir_all(&mask_dir).unwrap();
    write_mask_file(&mask_dir.join("train_mask.txt"), &ds.train_mask).unwrap();
    write_mask_file(&mask_dir.join("valid_mask.txt"), &ds.valid_mask).unwrap();
    write_mask_file(&mask_dir.join("test_mask.txt"), &ds.test_mask).unwrap();

    let out_dir = tmp.path().join("packed");
    let out = run(&[
        "ingest",
        "--edges",
        &edges_path.display().to_string(),
        "--features",
        &tmp.path().join("features.bin").display().to_string(),
        "--labels",
        &tmp.path().join("labels.bin").display().to_string(),
        "--masks",
        &mask_dir.display().to_string(),
        "--out",
        &out_dir.display().to_string(),
    ]);
    assert_code(&out, 0);

    let packed = Dataset::load(&out_dir).unwrap();
    assert_eq!(packed.graph.row_offsets(), ds.graph.row_offsets());
    assert_eq!(packed.graph.col_indices(), ds.graph.col_indices());
    assert_eq!(packed.features.values, ds.features.values);
    assert_eq!(packed.labels, ds.labels);
    assert_eq!(packed.num_classes, ds.num_classes);
    assert_eq!(packed.train_mask, ds.train_mask);
    assert_eq!(packed.valid_mask, ds.valid_mask);
    assert_eq!(packed.test_mask, ds.test_mask);
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let ckpt = tmp.path().join("nope.ckpt").display().to_string();
    let out = run(&["eval", "--data", &data, "--checkpoint", &ckpt]);
    assert_code(&out, 1);
    assert!(stderr_str(&out).contains("error:"), "stderr: {}", stderr_str(&out));
}

#[test]
fn unknown_config_key_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let cfg_path = tmp.path().join("run.json");
    fs::write(&cfg_path, r#"{"train": {"epochs": 3}, "modle": {}}"#).unwrap();
    let out = run(&[
        "train", "--data", &data, "--config", &cfg_path.display().to_string(),
    ]);
    assert_code(&out, 2);
    assert!(stderr_str(&out).contains("modle"), "stderr names the bad key");
}

#[test]
fn bad_flag_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let out = run(&["train", "--data", &data, "--variant", "bogus"]);
    assert_code(&out, 2);

    let out = run(&["train", "--data", &data, "--epochs", "0"]);
    assert_code(&out, 2);

    // A clap-level parse failure (unknown flag) is also a usage error.
    let out = run(&["train", "--no-such-flag"]);
    assert_code(&out, 2);

    let out = run(&[]);
    assert_code(&out, 2);
}

#[test]
fn bad_split_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let out_dir = tmp.path().join("run").display().to_string();
    train_small(&data, &out_dir, "0");
    let out = run_eval(&data, &out_dir, &["--split", "bogus"]);
    assert_code(&out, 2);
}

#[test]
fn mismatched_shape_cannot_load_a_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_dataset(tmp.path());
    let out_dir = tmp.path().join("run").display().to_string();
    train_small(&data, &out_dir, "0");
    // Evaluating with a different hidden width is a configuration error: the
    // checkpoint digest no longer matches.
    let out = run(&[
        "eval", "--data", &data, "--out", &out_dir, "--layers", "2", "--hops", "2", "--hidden",
        "16",
    ]);
    assert_code(&out, 2);
    assert!(stderr_str(&out).contains("error:"));
}

#[test]
fn verify_passes_clean_and_detects_injected_fault() {
    let out = run(&["verify", "--scale", "small"]);
    assert_code(&out, 0);
    let text = stdout_str(&out);
    assert!(text.contains("checks passed"), "report prints a tally:\n{text}");
    assert!(!text.contains("FAIL"), "clean run has no failures:\n{text}");

    let out = run(&["verify", "--scale", "small", "--inject-fault"]);
    assert_code(&out, 3);
    let text = stdout_str(&out);
    assert!(
        text.contains("fault-injection-row-sums") && text.contains("FAIL"),
        "fault check appears and fails:\n{text}"
    );
}

#[test]
fn verify_dumps_are_machine_readable() {
    let tmp = tempfile::tempdir().unwrap();
    let t_path = tmp.path().join("transition.txt");
    let a_path = tmp.path().join("hops.csv");
    let out = run(&[
        "verify",
        "--scale",
        "small",
        "--dump-transition",
        &t_path.display().to_string(),
        "--dump-hop-attention",
        &a_path.display().to_string(),
    ]);
    assert_code(&out, 0);

    let transition = fs::read_to_string(&t_path).unwrap();
    assert!(!transition.trim().is_empty());
    for line in transition.lines() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(parts.len(), 3, "line `{line}` is `row col weight`");
        parts[0].parse::<usize>().unwrap();
        parts[1].parse::<usize>().unwrap();
        let w: f64 = parts[2].parse().unwrap();
        assert!(w.is_finite());
    }

    let attention = fs::read_to_string(&a_path).unwrap();
    let mut lines = attention.lines();
    let header = lines.next().unwrap();
    let hops = header.split(',').count();
    assert!(header.starts_with("hop0,hop1"), "header: {header}");
    for line in lines {
        let row: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(row.len(), hops);
        let sum: f64 = row.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-6, "attention rows stay normalized: {line}");
    }
}
