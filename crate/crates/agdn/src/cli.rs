//! Command-line front end: dataset ingestion and synthesis, training,
//! evaluation, and the self-verification suite.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error,
//! 3 verification failure.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::{ingest, synth_sbm, Dataset, IngestPaths, SbmConfig};
use crate::error::{Error, Result};
use crate::layer::{diffuse, hop_attention};
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig};
use crate::tensor::{Tape, Tensor};
use crate::train::{evaluate, train, TrainConfig, TrainReport};
use crate::transition::{build_att_transition, build_gcn_transition};
use crate::verify::{all_passed, render_report, row_stochastic_error, run_all, Check, Scale};

/// Complete description of a run: architecture, optimization settings, and
/// file locations. Flags override file values; file values override
/// defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset directory produced by `ingest` or `synth`.
    pub data: Option<PathBuf>,
    /// Output directory for checkpoint, metrics, and summary.
    pub out: Option<PathBuf>,
    /// Metrics log path; when unset, metrics stream to stdout and
    /// `<out>/metrics.jsonl`.
    pub log: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Overrides shared by `train` and `eval`.
#[derive(Debug, Clone, Args)]
pub struct RunFlags {
    /// JSON run-configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Seed for initialization, dropout, and label sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Stacked layer count.
    #[arg(long)]
    layers: Option<usize>,
    /// Diffusion hops per layer.
    #[arg(long)]
    hops: Option<usize>,
    /// Attention heads per layer.
    #[arg(long)]
    heads: Option<usize>,
    /// Hidden width.
    #[arg(long)]
    hidden: Option<usize>,
    /// Transition variant: gcn-ha or gat-ha.
    #[arg(long)]
    variant: Option<String>,
    /// Feed masked one-hot training labels as extra input features.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    use_labels: Option<bool>,
    /// Metrics log file (one JSON object per line).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn resolve(flags: &RunFlags) -> Result<RunConfig> {
    let mut cfg = match &flags.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.train.seed = seed;
    }
    if let Some(epochs) = flags.epochs {
        cfg.train.epochs = epochs;
    }
    if let Some(lr) = flags.lr {
        cfg.train.learning_rate = lr;
    }
    if let Some(layers) = flags.layers {
        cfg.model.layers = layers;
    }
    if let Some(hops) = flags.hops {
        cfg.model.hops = hops;
    }
    if let Some(heads) = flags.heads {
        cfg.model.heads = heads;
    }
    if let Some(hidden) = flags.hidden {
        cfg.model.hidden_dim = hidden;
    }
    if let Some(v) = &flags.variant {
        cfg.model.variant = v.parse()?;
    }
    if let Some(ul) = flags.use_labels {
        cfg.model.use_labels = ul;
    }
    if let Some(data) = &flags.data {
        cfg.data = Some(data.clone());
    }
    if let Some(log) = &flags.log {
        cfg.log = Some(log.clone());
    }
    if let Some(out) = &flags.out {
        cfg.out = Some(out.clone());
    }
    cfg.train.validate()?;
    Ok(cfg)
}

#[derive(Parser)]
#[command(
    name = "agdn",
    version,
    about = "Multi-hop graph diffusion networks with hop-wise attention"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Package loose edge/feature/label/mask files into a dataset directory.
    Ingest {
        /// Whitespace-separated `src dst` edge list; `#` starts a comment.
        #[arg(long)]
        edges: PathBuf,
        /// Feature matrix (`.bin` with JSON shape sidecar).
        #[arg(long)]
        features: PathBuf,
        /// N x 1 label matrix; -1 marks unlabeled nodes.
        #[arg(long)]
        labels: PathBuf,
        /// Directory holding train_mask.txt, valid_mask.txt, test_mask.txt.
        #[arg(long)]
        masks: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a stochastic-block-model dataset.
    Synth {
        #[arg(long, default_value_t = 300)]
        nodes: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        /// Within-class edge probability.
        #[arg(long, default_value_t = 0.1)]
        p_in: f64,
        /// Between-class edge probability.
        #[arg(long, default_value_t = 0.01)]
        p_out: f64,
        #[arg(long, default_value_t = 8)]
        feature_dim: usize,
        /// Standard deviation of the Gaussian feature noise.
        #[arg(long, default_value_t = 1.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, metrics log, and summary JSON.
    Train {
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Evaluate a checkpoint and print accuracy JSON.
    Eval {
        #[command(flatten)]
        flags: RunFlags,
        /// Checkpoint file; defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Split to report: train, valid, test, or all.
        #[arg(long, default_value = "all")]
        split: String,
    },
    /// Run every invariant check and print a pass/fail table.
    Verify {
        /// `small` for a quick pass, `full` for the complete suite.
        #[arg(long, default_value = "small")]
        scale: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt one transition weight to demonstrate failure detection.
        #[arg(long)]
        inject_fault: bool,
        /// Write a demo transition matrix as `row col weight` lines.
        #[arg(long)]
        dump_transition: Option<PathBuf>,
        /// Write a demo hop-attention matrix as CSV.
        #[arg(long)]
        dump_hop_attention: Option<PathBuf>,
    },
}

fn cmd_ingest(
    edges: PathBuf,
    features: PathBuf,
    labels: PathBuf,
    masks: PathBuf,
    out: PathBuf,
) -> Result<()> {
    let ds = ingest(&IngestPaths {
        edges,
        features,
        labels,
        mask_dir: masks,
    })?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    ds.save(&out)?;
    println!(
        "{}",
        json!({
            "nodes": ds.num_nodes(),
            "undirected_edges": ds.graph.undirected_edge_count(),
            "feature_dim": ds.feature_dim(),
            "classes": ds.num_classes,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    nodes: usize,
    classes: usize,
    p_in: f64,
    p_out: f64,
    feature_dim: usize,
    noise: f64,
    seed: u64,
    out: PathBuf,
) -> Result<()> {
    let ds = synth_sbm(&SbmConfig {
        num_nodes: nodes,
        num_classes: classes,
        p_in,
        p_out,
        feature_dim,
        feature_noise: noise,
        seed,
    })?;
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    ds.save(&out)?;
    println!(
        "{}",
        json!({
            "nodes": ds.num_nodes(),
            "undirected_edges": ds.graph.undirected_edge_count(),
            "feature_dim": ds.feature_dim(),
            "classes": ds.num_classes,
            "out": out.display().to_string(),
        })
    );
    Ok(())
}

fn load_run_dataset(cfg: &mut RunConfig) -> Result<Dataset> {
    let data_dir = cfg.data.clone().ok_or_else(|| {
        Error::Config("no dataset directory (pass --data or set `data` in the config)".into())
    })?;
    let ds = Dataset::load(&data_dir)?;
    cfg.model.feature_dim = ds.feature_dim();
    cfg.model.num_classes = ds.num_classes;
    cfg.model.validate()?;
    Ok(ds)
}

/// Summary JSON: run outcome plus a config echo. The digest covers every
/// reproducible field — wall time and file locations are excluded so a
/// re-run with the same seed hashes identically.
fn build_summary(
    cfg: &RunConfig,
    report: &TrainReport,
    accs: (f64, f64, f64),
    wall_seconds: f64,
) -> Result<serde_json::Value> {
    let to_err = |e: serde_json::Error| Error::Config(e.to_string());
    let mut summary = json!({
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs_run,
        "final_train_loss": report.final_train_loss,
        "train_acc": accs.0,
        "valid_acc": accs.1,
        "test_acc": accs.2,
        "config": serde_json::to_value(cfg).map_err(to_err)?,
    });
    let mut hashed = summary.clone();
    if let Some(config) = hashed.get_mut("config").and_then(|c| c.as_object_mut()) {
        config.remove("data");
        config.remove("out");
        config.remove("log");
    }
    let canonical = serde_json::to_string(&hashed).map_err(to_err)?;
    let digest = hex::encode(Sha256::digest(canonical.as_bytes()));
    let obj = summary.as_object_mut().expect("summary is an object");
    obj.insert("digest".into(), json!(digest));
    obj.insert("wall_time_seconds".into(), json!(wall_seconds));
    Ok(summary)
}

fn cmd_train(flags: &RunFlags) -> Result<()> {
    let start = Instant::now();
    let mut cfg = resolve(flags)?;
    let ds = load_run_dataset(&mut cfg)?;
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("agdn-out"));
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let log_path = cfg
        .log
        .clone()
        .unwrap_or_else(|| out_dir.join("metrics.jsonl"));
    let echo_stdout = cfg.log.is_none();
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;

    let mut sink_err: Option<Error> = None;
    let (params, report) = train(&ds, &cfg.model, &cfg.train, |record| {
        let line = match serde_json::to_string(record) {
            Ok(line) => line,
            Err(e) => {
                sink_err.get_or_insert(Error::Config(e.to_string()));
                return;
            }
        };
        if echo_stdout {
            println!("{line}");
        }
        if let Err(e) = writeln!(log, "{line}") {
            sink_err.get_or_insert(Error::io(&log_path, e));
        }
    })?;
    if let Some(e) = sink_err {
        return Err(e);
    }

    let ckpt_path = out_dir.join("model.ckpt");
    save_checkpoint(&ckpt_path, &cfg.model, &params)?;
    // Accuracies are recomputed from the checkpoint as re-read from disk,
    // so a later `eval` of the same file reproduces them exactly.
    let reloaded = load_checkpoint(&ckpt_path, &cfg.model)?;
    let accs = evaluate(&ds, &reloaded, &cfg.model)?;
    let summary = build_summary(&cfg, &report, accs, start.elapsed().as_secs_f64())?;
    let summary_path = out_dir.join("summary.json");
    let pretty =
        serde_json::to_string_pretty(&summary).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&summary_path, pretty + "\n").map_err(|e| Error::io(&summary_path, e))?;
    println!(
        "{}",
        serde_json::to_string(&summary).map_err(|e| Error::Config(e.to_string()))?
    );
    Ok(())
}

fn cmd_eval(flags: &RunFlags, checkpoint: Option<PathBuf>, split: &str) -> Result<()> {
    let mut cfg = resolve(flags)?;
    let ds = load_run_dataset(&mut cfg)?;
    let ckpt = checkpoint
        .or_else(|| cfg.out.as_ref().map(|o| o.join("model.ckpt")))
        .ok_or_else(|| Error::Config("no checkpoint (pass --checkpoint or --out)".into()))?;
    if !ckpt.exists() {
        return Err(Error::InvalidInput(format!(
            "checkpoint `{}` does not exist",
            ckpt.display()
        )));
    }
    let params = load_checkpoint(&ckpt, &cfg.model)?;
    let (train_acc, valid_acc, test_acc) = evaluate(&ds, &params, &cfg.model)?;
    let value = match split {
        "all" => json!({"train_acc": train_acc, "valid_acc": valid_acc, "test_acc": test_acc}),
        "train" => json!({"split": "train", "accuracy": train_acc}),
        "valid" => json!({"split": "valid", "accuracy": valid_acc}),
        "test" => json!({"split": "test", "accuracy": test_acc}),
        other => {
            return Err(Error::Config(format!(
                "unknown split `{other}` (expected train, valid, test, or all)"
            )))
        }
    };
    println!("{value}");
    Ok(())
}

fn demo_dataset(seed: u64) -> Result<Dataset> {
    synth_sbm(&SbmConfig {
        num_nodes: 24,
        num_classes: 3,
        p_in: 0.4,
        p_out: 0.05,
        feature_dim: 4,
        feature_noise: 0.5,
        seed,
    })
}

/// Deliberately corrupt one attention weight and re-measure row sums; the
/// resulting check is expected to fail.
fn injected_fault_check(seed: u64) -> Result<Check> {
    let tape = Tape::inactive();
    let ds = demo_dataset(seed)?;
    let h = Tensor::new(ds.num_nodes(), ds.feature_dim(), ds.features.to_f64())?;
    let mut rng = StdRng::seed_from_u64(seed);
    let a = Tensor::new(
        2 * ds.feature_dim(),
        1,
        (0..2 * ds.feature_dim())
            .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
            .collect(),
    )?;
    let t = build_att_transition(&tape, &ds.graph, &h, &a, 0.2)?;
    let w = t.weights().value_at(0, 0);
    t.weights().set_value_at(0, 0, w + 0.25);
    let err = row_stochastic_error(&t);
    Ok(Check {
        name: "fault-injection-row-sums".into(),
        max_err: err,
        tolerance: 1e-6,
        passed: err <= 1e-6,
        hard: true,
        detail: "one weight deliberately perturbed by 0.25 — must fail".into(),
    })
}

fn cmd_verify(
    scale: &str,
    seed: u64,
    inject_fault: bool,
    dump_transition: Option<PathBuf>,
    dump_hop_attention: Option<PathBuf>,
) -> Result<()> {
    let scale: Scale = scale.parse()?;
    let mut checks = run_all(scale, seed)?;
    if inject_fault {
        checks.push(injected_fault_check(seed)?);
    }
    if let Some(path) = dump_transition {
        let ds = demo_dataset(seed)?;
        let t = build_gcn_transition(&ds.graph)?;
        fs::write(&path, t.to_coordinate_text()).map_err(|e| Error::io(&path, e))?;
    }
    if let Some(path) = dump_hop_attention {
        let tape = Tape::inactive();
        let ds = demo_dataset(seed)?;
        let h = Tensor::new(ds.num_nodes(), ds.feature_dim(), ds.features.to_f64())?;
        let mut rng = StdRng::seed_from_u64(seed);
        let a_hw = Tensor::new(
            2 * ds.feature_dim(),
            1,
            (0..2 * ds.feature_dim())
                .map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0))
                .collect(),
        )?;
        let t = build_gcn_transition(&ds.graph)?;
        let stack = diffuse(&tape, &t, &h, 3)?;
        let att = hop_attention(&tape, &stack, &a_hw, 0.2)?;
        let mut csv = String::from("hop0,hop1,hop2,hop3\n");
        let values = att.values();
        for i in 0..att.rows() {
            let row: Vec<String> = values[i * 4..(i + 1) * 4]
                .iter()
                .map(|v| format!("{v:.9}"))
                .collect();
            csv.push_str(&row.join(","));
            csv.push('\n');
        }
        fs::write(&path, csv).map_err(|e| Error::io(&path, e))?;
    }
    print!("{}", render_report(&checks));
    if all_passed(&checks) {
        Ok(())
    } else {
        Err(Error::Verification(
            "one or more invariant checks failed".into(),
        ))
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Ingest {
            edges,
            features,
            labels,
            masks,
            out,
        } => cmd_ingest(edges, features, labels, masks, out),
        Command::Synth {
            nodes,
            classes,
            p_in,
            p_out,
            feature_dim,
            noise,
            seed,
            out,
        } => cmd_synth(nodes, classes, p_in, p_out, feature_dim, noise, seed, out),
        Command::Train { flags } => cmd_train(&flags),
        Command::Eval {
            flags,
            checkpoint,
            split,
        } => cmd_eval(&flags, checkpoint, &split),
        Command::Verify {
            scale,
            seed,
            inject_fault,
            dump_transition,
            dump_hop_attention,
        } => cmd_verify(&scale, seed, inject_fault, dump_transition, dump_hop_attention),
    }
}

/// Parse arguments, run the chosen command, and map errors to exit codes.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layer::Variant;

    fn flags() -> RunFlags {
        RunFlags {
            config: None,
            data: None,
            seed: None,
            epochs: None,
            lr: None,
            layers: None,
            hops: None,
            heads: None,
            hidden: None,
            variant: None,
            use_labels: None,
            log: None,
            out: None,
        }
    }

    #[test]
    fn defaults_match_reference_hyperparameters() {
        let cfg = resolve(&flags()).unwrap();
        assert_eq!(cfg.model.layers, 3);
        assert_eq!(cfg.model.hops, 3);
        assert_eq!(cfg.model.hidden_dim, 256);
        assert_eq!(cfg.train.learning_rate, 0.002);
        assert_eq!(cfg.model.leaky_slope, 0.2);
    }

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"model": {"layers": 2, "hops": 5}, "train": {"epochs": 7}}"#,
        )
        .unwrap();
        let mut f = flags();
        f.config = Some(path);
        f.hops = Some(1);
        f.variant = Some("gat-ha".into());
        let cfg = resolve(&f).unwrap();
        assert_eq!(cfg.model.layers, 2); // from file
        assert_eq!(cfg.model.hops, 1); // flag wins
        assert_eq!(cfg.train.epochs, 7); // from file
        assert_eq!(cfg.model.heads, 1); // default
        assert_eq!(cfg.model.variant, Variant::GatHa);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"model": {"layrs": 2}}"#).unwrap();
        let mut f = flags();
        f.config = Some(path.clone());
        match resolve(&f).unwrap_err() {
            Error::Config(msg) => assert!(msg.contains("layrs"), "{msg}"),
            e => panic!("unexpected error {e:?}"),
        }
        fs::write(&path, r#"{"modle": {}}"#).unwrap();
        assert!(resolve(&f).is_err());
    }

    #[test]
    fn bad_variant_flag_is_a_config_error() {
        let mut f = flags();
        f.variant = Some("gcn".into());
        match resolve(&f).unwrap_err() {
            Error::Config(_) => {}
            e => panic!("unexpected error {e:?}"),
        }
    }

    #[test]
    fn summary_digest_ignores_paths_and_wall_time() {
        let report = TrainReport {
            best_epoch: 3,
            train_acc: 0.9,
            valid_acc: 0.8,
            test_acc: 0.7,
            final_train_loss: 0.5,
            epochs_run: 10,
        };
        let mut cfg = RunConfig {
            data: Some(PathBuf::from("/tmp/a")),
            ..RunConfig::default()
        };
        let a = build_summary(&cfg, &report, (0.9, 0.8, 0.7), 1.0).unwrap();
        cfg.data = Some(PathBuf::from("/tmp/b"));
        cfg.out = Some(PathBuf::from("/tmp/c"));
        let b = build_summary(&cfg, &report, (0.9, 0.8, 0.7), 9.0).unwrap();
        assert_eq!(a["digest"], b["digest"]);
        assert_ne!(a["wall_time_seconds"], b["wall_time_seconds"]);

        let mut other = RunConfig::default();
        other.train.seed = 42;
        let c = build_summary(&other, &report, (0.9, 0.8, 0.7), 1.0).unwrap();
        assert_ne!(a["digest"], c["digest"]);
    }

    #[test]
    fn injected_fault_reports_failure() {
        let check = injected_fault_check(0).unwrap();
        assert!(!check.passed);
        assert!(check.max_err > 1e-6);
    }
}
