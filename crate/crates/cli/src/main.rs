//! `seg-forge` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use seg_forge_core::config::{ConfigError, RunConfig};

/// Ultrasound lesion segmentation: enhancement, training, evaluation and
/// Grad-CAM explanations.
///
/// Settings come from built-in defaults, then `--config`, then command-line
/// flags, then `--set` overrides.  SEG_FORGE_THREADS caps worker threads
/// for eval and explain (default 1).
///
/// Exit codes: 1 usage, 2 config, 3 I/O, 4 numeric abort.
#[derive(Debug, Parser)]
#[command(name = "seg-forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Apply CLAHE to every PNG under a directory and report entropy and RMS contrast.
    Enhance(EnhanceArgs),
    /// Generate a synthetic corpus in BUSI layout.
    Synth(SynthArgs),
    /// Print class counts and lesion-pixel ratios of a corpus.
    Stats(StatsArgs),
    /// Train a model; writes checkpoints, metrics CSV and a run manifest.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation (or training) split.
    Eval(EvalArgs),
    /// Write predictions, processed inputs and Grad-CAM overlays.
    Explain(ExplainArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for corpus generation, splitting, initialization and training.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Output directory (`output.dir`).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set clahe.clip_limit=3`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct DataArg {
    /// Corpus root in BUSI layout (`data.root`).
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EnhanceArgs {
    #[command(flatten)]
    common: Common,
    /// Directory of PNG images, searched recursively.
    #[arg(long, value_name = "DIR")]
    input: PathBuf,
    /// Destination; defaults to `<out>/enhanced`.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Clip limit as a multiple of the uniform bin level (`clahe.clip_limit`).
    #[arg(long, value_name = "X")]
    clip_limit: Option<f64>,
    /// Tiles along each axis (`clahe.tiles_x` and `clahe.tiles_y`).
    #[arg(long, value_name = "N")]
    tiles: Option<usize>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    /// Destination root; defaults to `<out>/synthetic`.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Samples per class (`synth.benign`, `synth.malignant`, `synth.normal`).
    #[arg(long, value_name = "N")]
    per_class: Option<usize>,
    /// Image side length in pixels (`synth.size`).
    #[arg(long, value_name = "N")]
    size: Option<usize>,
}

#[derive(Debug, Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    /// Number of epochs (`train.epochs`).
    #[arg(long, value_name = "N")]
    epochs: Option<usize>,
    /// Optimizer steps per epoch (`train.steps_per_epoch`).
    #[arg(long, value_name = "N")]
    steps_per_epoch: Option<usize>,
    /// Samples per batch (`train.batch_size`).
    #[arg(long, value_name = "N")]
    batch_size: Option<usize>,
    /// Adam learning rate (`train.lr`).
    #[arg(long, value_name = "X")]
    lr: Option<f64>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint to load; defaults to `<out>/checkpoints/final.ckpt`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Which split to evaluate.
    #[arg(long, value_parser = ["train", "val"], default_value = "val")]
    split: String,
}

#[derive(Debug, Args)]
struct ExplainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    data: DataArg,
    /// Checkpoint to load; defaults to `<out>/checkpoints/final.ckpt`.
    #[arg(long, value_name = "PATH")]
    checkpoint: Option<PathBuf>,
    /// Target class index: 0 background, 1 benign, 2 malignant (`probe.class`).
    #[arg(long, value_name = "N")]
    class: Option<usize>,
    /// Layer to probe, e.g. dec0 or bottleneck (`probe.layer`).
    #[arg(long, value_name = "NAME")]
    layer: Option<String>,
    /// Explain only this sample id (e.g. `benign/synth_0001`); repeatable.
    /// Defaults to the validation split.
    #[arg(long, value_name = "ID")]
    sample: Vec<String>,
    /// Score the class over true lesion pixels only (`probe.use_mask`).
    #[arg(long)]
    use_mask: bool,
    /// Overlay opacity in [0, 1] (`probe.opacity`).
    #[arg(long, value_name = "X")]
    opacity: Option<f64>,
}

/// Error carrying its exit status.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Io(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Io(_) => 3,
            Failure::Numeric(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Io(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Io { .. } => Failure::Io(e.to_string()),
            _ => Failure::Config(e.to_string()),
        }
    }
}

/// Builds the run config: defaults, file, flags, then `--set`.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn show<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn data_flag(d: &DataArg) -> (&'static str, Option<String>) {
    ("data.root", d.data.as_ref().map(|p| p.display().to_string()))
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Enhance(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    ("clahe.clip_limit", show(&a.clip_limit)),
                    ("clahe.tiles_x", show(&a.tiles)),
                    ("clahe.tiles_y", show(&a.tiles)),
                ],
            )?;
            let output = a.output.unwrap_or_else(|| cfg.output_dir.join("enhanced"));
            commands::enhance(&cfg, &a.input, &output)
        }
        Command::Synth(a) => {
            let n = show(&a.per_class);
            let cfg = resolve(
                &a.common,
                &[
                    ("synth.benign", n.clone()),
                    ("synth.malignant", n.clone()),
                    ("synth.normal", n),
                    ("synth.size", show(&a.size)),
                ],
            )?;
            let output = a.output.unwrap_or_else(|| cfg.output_dir.join("synthetic"));
            commands::synth(&cfg, &output)
        }
        Command::Stats(a) => {
            let cfg = resolve(&a.common, &[data_flag(&a.data)])?;
            commands::stats(&cfg)
        }
        Command::Train(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    data_flag(&a.data),
                    ("train.epochs", show(&a.epochs)),
                    ("train.steps_per_epoch", show(&a.steps_per_epoch)),
                    ("train.batch_size", show(&a.batch_size)),
                    ("train.lr", show(&a.lr)),
                ],
            )?;
            commands::train(&cfg)
        }
        Command::Eval(a) => {
            let cfg = resolve(&a.common, &[data_flag(&a.data)])?;
            let ckpt = a.checkpoint.unwrap_or_else(|| commands::final_checkpoint(&cfg));
            commands::eval(&cfg, &ckpt, &a.split, commands::threads()?)
        }
        Command::Explain(a) => {
            let cfg = resolve(
                &a.common,
                &[
                    data_flag(&a.data),
                    ("probe.class", show(&a.class)),
                    ("probe.layer", a.layer.clone()),
                    ("probe.use_mask", a.use_mask.then(|| "true".to_string())),
                    ("probe.opacity", show(&a.opacity)),
                ],
            )?;
            let ckpt = a.checkpoint.unwrap_or_else(|| commands::final_checkpoint(&cfg));
            commands::explain(&cfg, &ckpt, &a.sample, commands::threads()?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
