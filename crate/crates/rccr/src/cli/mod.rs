//! Config-driven command surface: train, eval, ablate, selftest, gen-data.
//!
//! Every subcommand reads one TOML run config (defaults apply when no file
//! is given), then applies repeatable `--set key.path=value` overrides.
//! Unknown keys are rejected by name. Exit codes: 0 ok, 1 config error,
//! 2 runtime failure, 3 selftest failure.

pub mod ablate;
pub mod gendata;
pub mod selftest;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::data::{load_bundle, DataConfig};
use crate::eval::evaluate_model;
use crate::trainer::{train_loop, Checkpoint, TrainConfig, TrainState};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime failure: {0}")]
    Runtime(String),
    #[error("selftest failed: {0}")]
    Selftest(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Selftest(_) => 3,
        }
    }
}

impl From<crate::trainer::TrainError> for CliError {
    fn from(e: crate::trainer::TrainError) -> Self {
        match e {
            crate::trainer::TrainError::Config(c) => CliError::Config(c.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// One run-config document: training hyperparameters, dataset selection,
/// and the output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfigFile {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/run"),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "rccr", version, about = "Regional contrastive consistency regularization trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Run config TOML; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key, e.g. --set train.ablation.MB=false.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory (overrides output.dir).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compute device; only "cpu" is supported.
    #[arg(long, default_value = "cpu")]
    pub device: String,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and emit checkpoints, metrics, and a final report.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on the configured validation split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint archive to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Which branch to evaluate.
        #[arg(long, default_value = "teacher")]
        branch: EvalBranch,
    },
    /// Replay the ablation-table rows as a sweep of runs.
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        /// Sweep spec TOML (rows + seeds); the default sweep replays the
        /// cumulative ablation rows with the configured seed.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
    /// Run the built-in verification suites.
    Selftest {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a synthetic dataset to disk as PNGs plus manifests.
    GenData {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalBranch {
    Teacher,
    Student,
    Both,
}

/// Parses `raw` as a TOML literal where possible, falling back to a string.
fn parse_override_value(raw: &str) -> toml::Value {
    let text = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&text) {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `key.path=value` override onto a TOML document tree.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| {
        CliError::Config(format!("override '{assignment}' is not KEY=VALUE"))
    })?;
    let key = key.trim();
    if key.is_empty() {
        return Err(CliError::Config(format!(
            "override '{assignment}' has an empty key"
        )));
    }
    let value = parse_override_value(raw.trim());
    let mut node = doc;
    let segments: Vec<&str> = key.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        node = node
            .entry(segment.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Config(format!("override '{key}': '{segment}' is not a table"))
            })?;
    }
    node.insert(segments[segments.len() - 1].to_string(), value);
    Ok(())
}

/// Loads the run config, applies overrides, and validates it. The returned
/// base dir anchors relative dataset paths.
pub fn load_config(common: &CommonArgs) -> Result<(RunConfigFile, PathBuf), CliError> {
    let (cfg, base_dir) = load_config_unvalidated(common)?;
    cfg.train
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((cfg, base_dir))
}

/// Same parsing and override pipeline, but without semantic validation.
/// The selftest uses this so that injected invalid values (a zero
/// temperature, say) reach the guard inside the suite under test.
pub fn load_config_unvalidated(common: &CommonArgs) -> Result<(RunConfigFile, PathBuf), CliError> {
    if common.device != "cpu" {
        return Err(CliError::Config(format!(
            "device '{}' is not supported; this build is CPU-only",
            common.device
        )));
    }
    let (mut doc, base_dir) = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("read {}: {e}", path.display())))?;
            let doc: toml::Table = toml::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let base = path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from("."));
            (doc, base)
        }
        None => (toml::Table::new(), PathBuf::from(".")),
    };
    for assignment in &common.set {
        apply_override(&mut doc, assignment)?;
    }
    let text = toml::to_string(&doc)
        .map_err(|e| CliError::Config(format!("internal config reserialize: {e}")))?;
    let mut cfg: RunConfigFile =
        toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output.dir = out.clone();
    }
    Ok((cfg, base_dir))
}

/// Writes the resolved config and run metadata into the run directory so a
/// run can be reproduced from its artifacts alone.
pub fn write_run_metadata(cfg: &RunConfigFile, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", dir.display())))?;
    let resolved = toml::to_string_pretty(cfg)
        .map_err(|e| CliError::Runtime(format!("serialize config: {e}")))?;
    std::fs::write(dir.join("resolved_config.toml"), resolved)
        .map_err(|e| CliError::Runtime(format!("write resolved_config.toml: {e}")))?;
    let meta = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "seed": cfg.train.seed,
        "ablation": cfg.train.ablation,
        "iterations": cfg.train.iterations,
    });
    std::fs::write(
        dir.join("run_meta.json"),
        serde_json::to_string_pretty(&meta).expect("json"),
    )
    .map_err(|e| CliError::Runtime(format!("write run_meta.json: {e}")))?;
    Ok(())
}

/// `rccr train`
pub fn cmd_train(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, base_dir) = load_config(common)?;
    let out_dir = cfg.output.dir.clone();
    write_run_metadata(&cfg, &out_dir)?;
    let data = load_bundle(&cfg.data, &base_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut state = TrainState::init(&cfg.train)?;
    let artifacts = train_loop(&mut state, &cfg.train, &data, Some(&out_dir))?;
    println!(
        "trained {} iterations; final teacher mIoU {:.2} ({} val images)",
        cfg.train.iterations,
        artifacts.final_eval.report.mean_percent(),
        artifacts.final_eval.report.images,
    );
    println!("artifacts in {}", out_dir.display());
    Ok(())
}

fn print_report(tag: &str, report: &crate::eval::EvalReport) {
    println!("[{tag}] mean IoU {:.4} ({:.2}%)", report.mean_iou, report.mean_percent());
    for (class, iou) in report.per_class.iter().enumerate() {
        match iou {
            Some(v) => println!("[{tag}]   class {class}: {v:.4}"),
            None => println!("[{tag}]   class {class}: undefined (absent)"),
        }
    }
    for (name, value) in &report.subset_means {
        println!("[{tag}]   subset {name}: {value:.4}");
    }
}

/// `rccr eval`
pub fn cmd_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    branch: EvalBranch,
) -> Result<(), CliError> {
    let (cfg, base_dir) = load_config(common)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let (state, train_cfg) = TrainState::from_checkpoint(&ckpt)?;
    let data = load_bundle(&cfg.data, &base_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut reports = Vec::new();
    if matches!(branch, EvalBranch::Teacher | EvalBranch::Both) {
        let report = evaluate_model(
            &state.teacher.seg,
            &data.val,
            train_cfg.model.num_classes,
            &train_cfg.eval_subsets,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        print_report("teacher", &report);
        reports.push(("teacher", report));
    }
    if matches!(branch, EvalBranch::Student | EvalBranch::Both) {
        let report = evaluate_model(
            &state.student.seg,
            &data.val,
            train_cfg.model.num_classes,
            &train_cfg.eval_subsets,
        )
        .map_err(|e| CliError::Runtime(e.to_string()))?;
        print_report("student", &report);
        reports.push(("student", report));
    }
    if let Some(out) = &common.out {
        std::fs::create_dir_all(out)
            .map_err(|e| CliError::Runtime(format!("create {}: {e}", out.display())))?;
        for (tag, report) in &reports {
            std::fs::write(
                out.join(format!("eval_{tag}.json")),
                serde_json::to_string_pretty(report).expect("json"),
            )
            .map_err(|e| CliError::Runtime(format!("write eval report: {e}")))?;
        }
    }
    Ok(())
}

/// Top-level dispatch used by the binary.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Train { common } => cmd_train(common),
        Command::Eval {
            common,
            checkpoint,
            branch,
        } => cmd_eval(common, checkpoint, *branch),
        Command::Ablate { common, sweep } => ablate::cmd_ablate(common, sweep.as_deref()),
        Command::Selftest { common } => selftest::cmd_selftest(common),
        Command::GenData { common } => gendata::cmd_gen_data(common),
    }
}
