//! Argument parsing and settings resolution for the `prodapt` binary.
//!
//! Every setting is resolved as: command-line flag (or its environment
//! variable) > `--config` file > built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use prodapt_core::eval::ReportFormat;
use prodapt_core::sim2d::Setup;
use serde::Deserialize;

pub const DATA_DIR_ENV: &str = "PRODAPT_DATA_DIR";
pub const SEED_ENV: &str = "PRODAPT_SEED";

#[derive(Debug, Parser)]
#[command(name = "prodapt", version, about = "Blind navigation with contact memory and a diffusion policy")]
pub struct Cli {
    /// TOML file with per-command defaults ([collect], [train], [eval], [serve]).
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Record scripted demonstrations into a dataset directory.
    Collect(CollectFlags),
    /// Train a policy checkpoint from a dataset directory.
    Train(TrainFlags),
    /// Benchmark checkpoints on the evaluation layouts.
    Eval(EvalFlags),
    /// Render a rollout or episode file as an SVG plot.
    Replay(ReplayFlags),
    /// Serve the live session socket and UI assets.
    Serve(ServeFlags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct CollectFlags {
    /// Number of demonstrations to keep [default: 165].
    #[arg(long)]
    pub n: Option<usize>,
    /// Base seed [default: 0].
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Output dataset directory.
    #[arg(long, env = DATA_DIR_ENV)]
    pub out: Option<PathBuf>,
    /// Demonstration source: scripted or teleop [default: scripted].
    #[arg(long)]
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainFlags {
    /// Dataset directory.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training epochs [default: 500].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Training seed [default: 0].
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Observation horizon [default: 3].
    #[arg(long)]
    pub horizon_obs: Option<usize>,
    /// Keypoint memory size N_kp; 0 trains a keypoint-free baseline [default: 10].
    #[arg(long, value_name = "N_KP")]
    pub keypoints: Option<usize>,
    /// Peak learning rate [default: 1e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Minibatch size [default: 256].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Write per-epoch loss records (JSON lines) here.
    #[arg(long, value_name = "FILE")]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalFlags {
    /// Variant as LABEL=CHECKPOINT; repeatable.
    #[arg(long = "variant", value_name = "LABEL=PATH")]
    pub variants: Vec<String>,
    /// Comma-separated setups [default: clear,wall,bucket,elbow].
    #[arg(long, value_delimiter = ',')]
    pub setups: Option<Vec<Setup>>,
    /// Trials per setup and variant [default: 20].
    #[arg(long)]
    pub trials: Option<usize>,
    /// Base seed [default: 0].
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
    /// Report format: table, csv or markdown [default: table].
    #[arg(long)]
    pub format: Option<ReportFormat>,
    /// Write the rendered report here instead of stdout.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
    /// Also write the full report as JSON.
    #[arg(long, value_name = "FILE")]
    pub json: Option<PathBuf>,
    /// Write every rollout as `<setup>_<label>_<trial>.jsonl` into this directory.
    #[arg(long, value_name = "DIR")]
    pub rollouts: Option<PathBuf>,
    /// Run trials concurrently (timings are then not comparable).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub parallel: Option<bool>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReplayFlags {
    /// Rollout or episode file.
    #[arg(long)]
    pub input: PathBuf,
    /// SVG file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Plot title [default: input file name].
    #[arg(long)]
    pub title: Option<String>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ServeFlags {
    /// TCP port [default: 8080].
    #[arg(long)]
    pub port: Option<u16>,
    /// Listen address [default: 127.0.0.1].
    #[arg(long)]
    pub host: Option<String>,
    /// Session mode: teleop or watch [default: teleop].
    #[arg(long)]
    pub mode: Option<String>,
    /// Policy checkpoint for watch mode.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Built UI assets to serve.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
    /// Directory for teleop episodes.
    #[arg(long, env = DATA_DIR_ENV)]
    pub data_dir: Option<PathBuf>,
    /// Base sampling seed for watch mode [default: 0].
    #[arg(long, env = SEED_ENV)]
    pub seed: Option<u64>,
}

/// Contents of a `--config` file. Every key is optional.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    #[serde(default)]
    pub collect: CollectFile,
    #[serde(default)]
    pub train: TrainFile,
    #[serde(default)]
    pub eval: EvalFile,
    #[serde(default)]
    pub serve: ServeFile,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectFile {
    pub n: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub source: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub epochs: Option<usize>,
    pub seed: Option<u64>,
    pub horizon_obs: Option<usize>,
    pub keypoints: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalFile {
    /// LABEL=PATH entries.
    pub variants: Option<Vec<String>>,
    pub setups: Option<Vec<Setup>>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub format: Option<ReportFormat>,
    pub parallel: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeFile {
    pub port: Option<u16>,
    pub host: Option<String>,
    pub mode: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn required<T>(value: Option<T>, flag: &str) -> anyhow::Result<T> {
    value.with_context(|| format!("--{flag} is required (flag, environment or config file)"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectSettings {
    pub n: usize,
    pub seed: u64,
    pub out: PathBuf,
}

pub fn resolve_collect(f: &CollectFlags, c: &CollectFile) -> anyhow::Result<CollectSettings> {
    let source = f.source.clone().or(c.source.clone()).unwrap_or_else(|| "scripted".into());
    match source.as_str() {
        "scripted" => {}
        "teleop" => bail!("teleop demonstrations are recorded live with `prodapt serve --mode teleop`"),
        other => bail!("unknown source '{other}' (expected scripted or teleop)"),
    }
    let n = f.n.or(c.n).unwrap_or(165);
    if n == 0 {
        bail!("--n must be at least 1");
    }
    Ok(CollectSettings {
        n,
        seed: f.seed.or(c.seed).unwrap_or(0),
        out: required(f.out.clone().or(c.out.clone()), "out")?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub data: PathBuf,
    pub out: PathBuf,
    pub epochs: usize,
    pub seed: u64,
    pub horizon_obs: usize,
    /// Keypoint memory size; 0 disables keypoint conditioning.
    pub keypoints: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub log: Option<PathBuf>,
}

pub fn resolve_train(f: &TrainFlags, c: &TrainFile) -> anyhow::Result<TrainSettings> {
    let s = TrainSettings {
        data: required(f.data.clone().or(c.data.clone()), "data")?,
        out: required(f.out.clone().or(c.out.clone()), "out")?,
        epochs: f.epochs.or(c.epochs).unwrap_or(500),
        seed: f.seed.or(c.seed).unwrap_or(0),
        horizon_obs: f.horizon_obs.or(c.horizon_obs).unwrap_or(3),
        keypoints: f.keypoints.or(c.keypoints).unwrap_or(10),
        lr: f.lr.or(c.lr).unwrap_or(1e-4),
        batch_size: f.batch_size.or(c.batch_size).unwrap_or(256),
        log: f.log.clone(),
    };
    if s.epochs == 0 || s.horizon_obs == 0 || s.batch_size == 0 {
        bail!("--epochs, --horizon-obs and --batch-size must be positive");
    }
    if !(s.lr > 0.0 && s.lr.is_finite()) {
        bail!("--lr must be a positive number");
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub variants: Vec<(String, PathBuf)>,
    pub setups: Vec<Setup>,
    pub trials: usize,
    pub seed: u64,
    pub format: ReportFormat,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
    pub rollouts: Option<PathBuf>,
    pub parallel: bool,
}

fn parse_variant(s: &str) -> anyhow::Result<(String, PathBuf)> {
    match s.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => Ok((label.to_string(), PathBuf::from(path))),
        _ => bail!("variant '{s}' is not LABEL=PATH"),
    }
}

pub fn resolve_eval(f: &EvalFlags, c: &EvalFile) -> anyhow::Result<EvalSettings> {
    let raw = if f.variants.is_empty() {
        c.variants.clone().unwrap_or_default()
    } else {
        f.variants.clone()
    };
    if raw.is_empty() {
        bail!("at least one --variant LABEL=PATH is required");
    }
    let variants = raw.iter().map(|v| parse_variant(v)).collect::<anyhow::Result<Vec<_>>>()?;
    let trials = f.trials.or(c.trials).unwrap_or(20);
    if trials == 0 {
        bail!("--trials must be at least 1");
    }
    let setups = f.setups.clone().or(c.setups.clone()).unwrap_or_else(|| Setup::ALL.to_vec());
    if setups.is_empty() {
        bail!("--setups must name at least one setup");
    }
    Ok(EvalSettings {
        variants,
        setups,
        trials,
        seed: f.seed.or(c.seed).unwrap_or(0),
        format: f.format.or(c.format).unwrap_or(ReportFormat::Table),
        out: f.out.clone(),
        json: f.json.clone(),
        rollouts: f.rollouts.clone(),
        parallel: f.parallel.or(c.parallel).unwrap_or(false),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeSettings {
    pub port: u16,
    pub host: String,
    pub mode: prodapt_server::Mode,
    pub checkpoint: Option<PathBuf>,
    pub static_dir: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub seed: u64,
}

pub fn resolve_serve(f: &ServeFlags, c: &ServeFile) -> anyhow::Result<ServeSettings> {
    let mode: prodapt_server::Mode = f
        .mode
        .clone()
        .or(c.mode.clone())
        .unwrap_or_else(|| "teleop".into())
        .parse()
        .map_err(anyhow::Error::msg)?;
    let checkpoint = f.checkpoint.clone().or(c.checkpoint.clone());
    if mode == prodapt_server::Mode::Watch && checkpoint.is_none() {
        bail!("--mode watch needs --checkpoint");
    }
    Ok(ServeSettings {
        port: f.port.or(c.port).unwrap_or(8080),
        host: f.host.clone().or(c.host.clone()).unwrap_or_else(|| "127.0.0.1".into()),
        mode,
        checkpoint,
        static_dir: f.static_dir.clone().or(c.static_dir.clone()),
        data_dir: f
            .data_dir
            .clone()
            .or(c.data_dir.clone())
            .unwrap_or_else(|| PathBuf::from("teleop_data")),
        seed: f.seed.or(c.seed).unwrap_or(0),
    })
}
