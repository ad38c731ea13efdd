//! Command-line front end: `train`, `score`, `eval`, `sweep` and `synth`.
//!
//! Every command writes its outputs plus a `manifest.json` under `--out-dir`.
//! Settings resolve as flags over a flat `key = value` config file over
//! defaults. Exit codes: 0 success, 1 I/O failure, 2 invalid input or
//! configuration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::Error;
use crate::eval::{
    image_metrics, pixel_metrics, LabeledScores, MaskedMap, MetricsReport, DEFAULT_FPR_LIMIT,
    DEFAULT_PRO_THRESHOLDS,
};
use crate::graph::build_grid_topology;
use crate::pgm::{read_mask_pgm8, write_mask_pgm8, write_pgm16, Mask};
use crate::score::{score_with_topology, AnomalyResult, Pooling, ScoreConfig};
use crate::synth::{generate_anomalous, generate_normal, placement_rng, random_block, SynthSpec};
use crate::tokenio::{read_tokens_file, write_tokens, PatchGrid};
use crate::train::{
    check_support, load_checkpoint_file, save_checkpoint, Checkpoint, TrainConfig, TrainOutcome,
};

pub const MODEL_FILE: &str = "model.gadc";
pub const HISTORY_FILE: &str = "loss_history.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCORES_FILE: &str = "scores.csv";
pub const MAPS_DIR: &str = "maps";
pub const METRICS_CSV_FILE: &str = "metrics.csv";
pub const METRICS_JSONL_FILE: &str = "metrics.jsonl";
pub const SWEEP_FILE: &str = "sweep.csv";

/// Pixel maps are upsampled by this factor per patch unless overridden.
pub const DEFAULT_MAP_SCALE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn invalid(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn io(path: &Path, err: std::io::Error) -> Self {
        Self {
            code: 1,
            message: format!("{}: {err}", path.display()),
        }
    }

    fn at(path: &Path, err: Error) -> Self {
        Self {
            code: if err.is_validation() { 2 } else { 1 },
            message: format!("{}: {err}", path.display()),
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        Self {
            code: if err.is_validation() { 2 } else { 1 },
            message: err.to_string(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(
    name = "patchgat",
    version,
    about = "Few-shot anomaly detection on patch-token grids"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model on support token files.
    Train(TrainArgs),
    /// Score query token files with a trained model.
    Score(ScoreArgs),
    /// Compute image and pixel metrics from scores, labels, maps and masks.
    Eval(EvalArgs),
    /// Train, score and evaluate every point of a hyperparameter grid.
    Sweep(SweepArgs),
    /// Write a synthetic benchmark directory.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Support token files.
    #[arg(required = true)]
    pub support: Vec<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Flat key = value settings file; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub lr: Option<f64>,
    /// Maximum number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of attentional layers R.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Encoder width F.
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    /// Latent width f of the alignment heads.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long)]
    pub g_hidden_dim: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub mask_ratio: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// gat or gcn.
    #[arg(long)]
    pub aggregation: Option<String>,
    /// sce, mse or cosine.
    #[arg(long)]
    pub objective: Option<String>,
    #[arg(long)]
    pub leaky_slope: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Query token files.
    #[arg(required = true)]
    pub queries: Vec<PathBuf>,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub score: ScoreFlags,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ScoreFlags {
    /// topk or max.
    #[arg(long)]
    pub pooling: Option<String>,
    #[arg(long)]
    pub top_ratio: Option<f64>,
    /// Gaussian blur σ in patch units.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Output pixels per patch along each axis.
    #[arg(long)]
    pub scale: Option<usize>,
    #[arg(long)]
    pub out_rows: Option<usize>,
    #[arg(long)]
    pub out_cols: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OutputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Score CSV written by `score`.
    #[arg(long, requires = "labels")]
    pub scores: Option<PathBuf>,
    /// CSV with `file,label` rows; label 1 marks an anomalous image.
    #[arg(long, requires = "scores")]
    pub labels: Option<PathBuf>,
    /// Directory of raw maps (`.gadt`) written by `score`.
    #[arg(long, requires = "masks")]
    pub maps: Option<PathBuf>,
    /// Directory of 8-bit PGM masks named after the maps.
    #[arg(long, requires = "maps")]
    pub masks: Option<PathBuf>,
    /// Treat maps without a mask as defect-free instead of failing.
    #[arg(long)]
    pub allow_missing_masks: bool,
    #[arg(long, value_enum, default_value = "csv")]
    pub format: OutputFormat,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub eval: EvalFlags,
}

#[derive(Debug, Args, Clone, Default)]
pub struct EvalFlags {
    /// FPR integration limit of the PRO curve.
    #[arg(long)]
    pub fpr_limit: Option<f64>,
    #[arg(long)]
    pub pro_thresholds: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Grid file: one `key = v1, v2, ...` line per swept setting.
    #[arg(long)]
    pub grid: PathBuf,
    /// Benchmark directory with support/, test/, labels.csv and optional masks/.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base seed; grid point i trains with seed base + i.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub support: usize,
    #[arg(long, default_value_t = 20)]
    pub normal: usize,
    #[arg(long, default_value_t = 20)]
    pub anomalous: usize,
    #[arg(long, default_value_t = 32)]
    pub rows: usize,
    #[arg(long, default_value_t = 32)]
    pub cols: usize,
    #[arg(long, default_value_t = 64)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub rank: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sigma: f64,
    /// Anomaly shift in units of the noise sigma.
    #[arg(long, default_value_t = 3.0)]
    pub magnitude: f64,
    /// Side of the square anomaly block, in patches.
    #[arg(long, default_value_t = 4)]
    pub block: usize,
}

// ---------------------------------------------------------------------------
// Settings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreSettings {
    pub pooling: Pooling,
    pub top_ratio: f64,
    pub blur_sigma: f64,
    pub scale: usize,
    pub out_rows: Option<usize>,
    pub out_cols: Option<usize>,
}

impl Default for ScoreSettings {
    fn default() -> Self {
        let base = ScoreConfig::for_grid(1, 1);
        Self {
            pooling: base.pooling,
            top_ratio: base.top_ratio,
            blur_sigma: base.blur_sigma,
            scale: DEFAULT_MAP_SCALE,
            out_rows: None,
            out_cols: None,
        }
    }
}

impl ScoreSettings {
    pub fn for_grid(&self, rows: usize, cols: usize) -> ScoreConfig {
        ScoreConfig {
            top_ratio: self.top_ratio,
            pooling: self.pooling,
            blur_sigma: self.blur_sigma,
            output_rows: self.out_rows.unwrap_or(rows * self.scale),
            output_cols: self.out_cols.unwrap_or(cols * self.scale),
        }
    }

    fn validate(&self) -> crate::Result<()> {
        if self.scale < 1 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        let cfg = ScoreConfig {
            output_rows: self.out_rows.unwrap_or(1),
            output_cols: self.out_cols.unwrap_or(1),
            ..self.for_grid(1, 1)
        };
        cfg.validate(1, 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSettings {
    pub fpr_limit: f64,
    pub pro_thresholds: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            fpr_limit: DEFAULT_FPR_LIMIT,
            pro_thresholds: DEFAULT_PRO_THRESHOLDS,
        }
    }
}

impl EvalSettings {
    fn validate(&self) -> crate::Result<()> {
        if !(self.fpr_limit > 0.0 && self.fpr_limit <= 1.0) {
            return Err(Error::Config(format!(
                "fpr_limit must lie in (0, 1], got {}",
                self.fpr_limit
            )));
        }
        if self.pro_thresholds < 2 {
            return Err(Error::Config("pro_thresholds must be at least 2".into()));
        }
        Ok(())
    }
}

/// Every tunable setting. `train.encoder.input_dim` is filled from the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub score: ScoreSettings,
    pub eval: EvalSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::new(1),
            score: ScoreSettings::default(),
            eval: EvalSettings::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Group {
    Train,
    Score,
    Eval,
}

/// Settings keys in snapshot order.
pub const TRAIN_KEYS: [&str; 15] = [
    "lr",
    "epochs",
    "patience",
    "min_delta",
    "seed",
    "layers",
    "hidden_dim",
    "latent_dim",
    "g_hidden_dim",
    "gamma",
    "mask_ratio",
    "dropout",
    "aggregation",
    "objective",
    "leaky_slope",
];
pub const SCORE_KEYS: [&str; 6] = [
    "pooling",
    "top_ratio",
    "sigma",
    "scale",
    "out_rows",
    "out_cols",
];
pub const EVAL_KEYS: [&str; 2] = ["fpr_limit", "pro_thresholds"];

fn group_of(key: &str) -> Option<Group> {
    if TRAIN_KEYS.contains(&key) {
        Some(Group::Train)
    } else if SCORE_KEYS.contains(&key) {
        Some(Group::Score)
    } else if EVAL_KEYS.contains(&key) {
        Some(Group::Eval)
    } else {
        None
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

fn flag_name(key: &str) -> String {
    format!("--{}", key.replace('_', "-"))
}

fn parse<T: std::str::FromStr>(value: &str) -> crate::Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse '{}'", value.trim())))
}

fn optional_usize(value: &str) -> crate::Result<Option<usize>> {
    match value.trim() {
        "" | "auto" => Ok(None),
        v => parse(v).map(Some),
    }
}

impl RunConfig {
    /// Sets one key and re-validates its group, so a failure names the
    /// setting that caused it. On failure `self` is left unchanged. `origin` is a flag or `file:line` label.
    pub fn apply(&mut self, key: &str, value: &str, origin: &str) -> CliResult<()> {
        let fail = |err: Error| {
            let detail = match err {
                Error::Config(msg) => msg,
                other => other.to_string(),
            };
            CliError::invalid(format!("invalid value for {origin}: {detail}"))
        };
        let mut next = self.clone();
        let t = &mut next.train;
        let s = &mut next.score;
        let e = &mut next.eval;
        let group = group_of(key)
            .ok_or_else(|| CliError::invalid(format!("{origin}: unknown setting '{key}'")))?;
        let set: crate::Result<()> = (|| {
            match key {
                "lr" => t.lr = parse(value)?,
                "epochs" => t.max_epochs = parse(value)?,
                "patience" => t.patience = parse(value)?,
                "min_delta" => t.min_delta = parse(value)?,
                "seed" => t.seed = parse(value)?,
                "layers" => t.encoder.num_layers = parse(value)?,
                "hidden_dim" => t.encoder.hidden_dim = parse(value)?,
                "latent_dim" => t.align.latent_dim = parse(value)?,
                "g_hidden_dim" => t.align.g_hidden_dim = parse(value)?,
                "gamma" => t.align.gamma = parse(value)?,
                "mask_ratio" => t.encoder.mask_ratio = parse(value)?,
                "dropout" => t.encoder.dropout_rate = parse(value)?,
                "aggregation" => t.encoder.aggregation = value.trim().parse()?,
                "objective" => t.align.objective = value.trim().parse()?,
                "leaky_slope" => t.encoder.leaky_slope = parse(value)?,
                "pooling" => s.pooling = value.trim().parse()?,
                "top_ratio" => s.top_ratio = parse(value)?,
                "sigma" => s.blur_sigma = parse(value)?,
                "scale" => s.scale = parse(value)?,
                "out_rows" => s.out_rows = optional_usize(value)?,
                "out_cols" => s.out_cols = optional_usize(value)?,
                "fpr_limit" => e.fpr_limit = parse(value)?,
                "pro_thresholds" => e.pro_thresholds = parse(value)?,
                _ => unreachable!("key groups cover every setting"),
            }
            match group {
                Group::Train => t.validate(),
                Group::Score => s.validate(),
                Group::Eval => e.validate(),
            }
        })();
        set.map_err(fail)?;
        *self = next;
        Ok(())
    }

    /// Applies a config file. Keys outside `groups` are skipped so one file
    /// can serve every command; unknown keys are errors.
    fn apply_file(&mut self, path: &Path, groups: &[Group]) -> CliResult<()> {
        for (line_no, key, value) in read_key_values(path)? {
            let origin = format!("{}:{line_no} ({key})", path.display());
            match group_of(&key) {
                None => {
                    return Err(CliError::invalid(format!(
                        "{origin}: unknown setting '{key}'"
                    )))
                }
                Some(g) if groups.contains(&g) => self.apply(&key, &value, &origin)?,
                Some(_) => {}
            }
        }
        Ok(())
    }

    fn apply_flags(&mut self, flags: &[(&str, Option<String>)]) -> CliResult<()> {
        for (key, value) in flags {
            if let Some(v) = value {
                self.apply(key, v, &flag_name(key))?;
            }
        }
        Ok(())
    }

    /// Current value of a setting, formatted as it would be written in a
    /// config file.
    pub fn value_of(&self, key: &str) -> String {
        let t = &self.train;
        let s = &self.score;
        let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "auto".into());
        match key {
            "lr" => t.lr.to_string(),
            "epochs" => t.max_epochs.to_string(),
            "patience" => t.patience.to_string(),
            "min_delta" => t.min_delta.to_string(),
            "seed" => t.seed.to_string(),
            "layers" => t.encoder.num_layers.to_string(),
            "hidden_dim" => t.encoder.hidden_dim.to_string(),
            "latent_dim" => t.align.latent_dim.to_string(),
            "g_hidden_dim" => t.align.g_hidden_dim.to_string(),
            "gamma" => t.align.gamma.to_string(),
            "mask_ratio" => t.encoder.mask_ratio.to_string(),
            "dropout" => t.encoder.dropout_rate.to_string(),
            "aggregation" => t.encoder.aggregation.name().into(),
            "objective" => t.align.objective.name().into(),
            "leaky_slope" => t.encoder.leaky_slope.to_string(),
            "pooling" => s.pooling.name().into(),
            "top_ratio" => s.top_ratio.to_string(),
            "sigma" => s.blur_sigma.to_string(),
            "scale" => s.scale.to_string(),
            "out_rows" => opt(s.out_rows),
            "out_cols" => opt(s.out_cols),
            "fpr_limit" => self.eval.fpr_limit.to_string(),
            "pro_thresholds" => self.eval.pro_thresholds.to_string(),
            _ => String::new(),
        }
    }
}

impl TrainFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        let s = |v: Option<f64>| v.map(|x| x.to_string());
        let u = |v: Option<usize>| v.map(|x| x.to_string());
        vec![
            ("lr", s(self.lr)),
            ("epochs", u(self.epochs)),
            ("patience", u(self.patience)),
            ("min_delta", s(self.min_delta)),
            ("seed", self.seed.map(|x| x.to_string())),
            ("layers", u(self.layers)),
            ("hidden_dim", u(self.hidden_dim)),
            ("latent_dim", u(self.latent_dim)),
            ("g_hidden_dim", u(self.g_hidden_dim)),
            ("gamma", s(self.gamma)),
            ("mask_ratio", s(self.mask_ratio)),
            ("dropout", s(self.dropout)),
            ("aggregation", self.aggregation.clone()),
            ("objective", self.objective.clone()),
            ("leaky_slope", s(self.leaky_slope)),
        ]
    }
}

impl ScoreFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        let u = |v: Option<usize>| v.map(|x| x.to_string());
        vec![
            ("pooling", self.pooling.clone()),
            ("top_ratio", self.top_ratio.map(|x| x.to_string())),
            ("sigma", self.sigma.map(|x| x.to_string())),
            ("scale", u(self.scale)),
            ("out_rows", u(self.out_rows)),
            ("out_cols", u(self.out_cols)),
        ]
    }
}

impl EvalFlags {
    fn pairs(&self) -> Vec<(&'static str, Option<String>)> {
        vec![
            ("fpr_limit", self.fpr_limit.map(|x| x.to_string())),
            ("pro_thresholds", self.pro_thresholds.map(|x| x.to_string())),
        ]
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// `(line number, normalized key, raw value)` for every `key = value` line;
/// blank lines and `#` comments are skipped.
fn read_key_values(path: &Path) -> CliResult<Vec<(usize, String, String)>> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            CliError::invalid(format!(
                "{}:{}: expected key = value",
                path.display(),
                i + 1
            ))
        })?;
        out.push((i + 1, normalize_key(key), value.trim().to_string()));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Manifest and output helpers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub train_config: Option<TrainConfig>,
    pub score_config: Option<ScoreSettings>,
    pub eval_config: Option<EvalSettings>,
    /// Wall-clock milliseconds per phase.
    pub timings_ms: BTreeMap<String, f64>,
    pub summary: BTreeMap<String, serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            train_config: None,
            score_config: None,
            eval_config: None,
            timings_ms: BTreeMap::new(),
            summary: BTreeMap::new(),
        }
    }

    fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_ms
            .insert(phase.into(), start.elapsed().as_secs_f64() * 1e3);
        out
    }

    fn write(&self, out_dir: &Path) -> CliResult<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::invalid(format!("manifest: {e}")))?;
        write_atomic(&out_dir.join(MANIFEST_FILE), format!("{json}\n").as_bytes())
    }
}

/// Writes through a sibling temporary file and a rename.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> CliResult<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn display(path: &Path) -> String {
    path.display().to_string()
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn read_grid(path: &Path) -> CliResult<PatchGrid> {
    read_tokens_file(path).map_err(|e| CliError::at(path, e))
}

/// Files in `dir` with the given extension, sorted by name.
fn list_files(dir: &Path, extension: &str) -> CliResult<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == extension) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn unique_stems(paths: &[PathBuf]) -> CliResult<Vec<String>> {
    let stems: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    let mut seen = BTreeSet::new();
    for s in &stems {
        if !seen.insert(s.as_str()) {
            return Err(CliError::invalid(format!(
                "two inputs share the name '{s}'"
            )));
        }
    }
    Ok(stems)
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(args) => cmd_train(&args),
        Command::Score(args) => cmd_score(&args),
        Command::Eval(args) => cmd_eval(&args),
        Command::Sweep(args) => cmd_sweep(&args),
        Command::Synth(args) => cmd_synth(&args),
    }
}

fn resolve(
    config: Option<&Path>,
    groups: &[Group],
    flags: &[(&str, Option<String>)],
) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path, groups)?;
    }
    cfg.apply_flags(flags)?;
    Ok(cfg)
}

fn load_support(paths: &[PathBuf]) -> CliResult<Vec<PatchGrid>> {
    let grids = paths
        .iter()
        .map(|p| read_grid(p))
        .collect::<CliResult<Vec<_>>>()?;
    let first = &grids[0];
    for (grid, path) in grids.iter().zip(paths) {
        if (grid.rows(), grid.cols(), grid.dim()) != (first.rows(), first.cols(), first.dim()) {
            return Err(CliError::invalid(format!(
                "mixed grid dimensions: {} is {}x{}x{}, {} is {}x{}x{}",
                paths[0].display(),
                first.rows(),
                first.cols(),
                first.dim(),
                path.display(),
                grid.rows(),
                grid.cols(),
                grid.dim()
            )));
        }
    }
    Ok(grids)
}

fn history_csv(history: &[f32]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (epoch, loss) in history.iter().enumerate() {
        let _ = writeln!(out, "{epoch},{loss}");
    }
    out
}

/// Trains on validated support grids; shared by `train` and `sweep`.
pub fn train_on(support: &[PatchGrid], cfg: &TrainConfig) -> CliResult<(TrainOutcome, Checkpoint)> {
    let (rows, cols) = check_support(support, cfg.encoder.input_dim)?;
    let outcome = crate::train::train_model(support, cfg)?;
    let ckpt = Checkpoint::from_outcome(&outcome, rows, cols);
    Ok((outcome, ckpt))
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("train");
    let mut cfg = resolve(args.config.as_deref(), &[Group::Train], &args.train.pairs())?;
    let support = manifest.time("load", || load_support(&args.support))?;
    cfg.train.encoder.input_dim = support[0].dim();
    cfg.train.validate()?;
    create_dir(&args.out_dir)?;

    let (outcome, ckpt) = manifest.time("train", || train_on(&support, &cfg.train))?;
    let mut bytes = Vec::new();
    save_checkpoint(&ckpt, &mut bytes)?;
    let model_path = args.out_dir.join(MODEL_FILE);
    write_atomic(&model_path, &bytes)?;
    write_atomic(
        &args.out_dir.join(HISTORY_FILE),
        history_csv(&outcome.history).as_bytes(),
    )?;

    manifest.seed = Some(cfg.train.seed);
    manifest.inputs = args.support.iter().map(|p| display(p)).collect();
    manifest.outputs = vec![MODEL_FILE.into(), HISTORY_FILE.into()];
    manifest.train_config = Some(cfg.train.clone());
    manifest
        .summary
        .insert("epochs_run".into(), outcome.epochs_run().into());
    manifest
        .summary
        .insert("best_epoch".into(), outcome.best_epoch.into());
    manifest
        .summary
        .insert("best_loss".into(), (outcome.best_loss as f64).into());
    manifest
        .summary
        .insert("stopped_early".into(), outcome.stopped_early.into());
    manifest.write(&args.out_dir)?;
    println!(
        "trained {} epochs (best loss {} at epoch {}), wrote {}",
        outcome.epochs_run(),
        outcome.best_loss,
        outcome.best_epoch,
        model_path.display()
    );
    Ok(())
}

/// Scores every query against one model; shared by `score` and `sweep`.
pub fn score_all(
    ckpt: &Checkpoint,
    queries: &[(String, PatchGrid)],
    settings: &ScoreSettings,
) -> CliResult<Vec<AnomalyResult>> {
    let topo = build_grid_topology(ckpt.grid_rows, ckpt.grid_cols)?;
    let cfg = settings.for_grid(ckpt.grid_rows, ckpt.grid_cols);
    queries
        .iter()
        .map(|(name, grid)| {
            let dims = (grid.rows(), grid.cols(), grid.dim());
            let want = (
                ckpt.grid_rows,
                ckpt.grid_cols,
                ckpt.model.config.encoder.input_dim,
            );
            if dims != want {
                return Err(CliError::invalid(format!(
                    "{name}: grid is {}x{}x{}, model expects {}x{}x{}",
                    dims.0, dims.1, dims.2, want.0, want.1, want.2
                )));
            }
            Ok(score_with_topology(grid, &ckpt.model, &topo, &cfg)?)
        })
        .collect()
}

pub fn scores_csv(names: &[String], results: &[AnomalyResult]) -> String {
    let mut out = String::from("file,image_score\n");
    for (name, r) in names.iter().zip(results) {
        let _ = writeln!(out, "{name},{}", r.image_score);
    }
    out
}

pub fn cmd_score(args: &ScoreArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("score");
    let cfg = resolve(args.config.as_deref(), &[Group::Score], &args.score.pairs())?;
    let stems = unique_stems(&args.queries)?;
    let ckpt = manifest.time("load", || {
        load_checkpoint_file(&args.model).map_err(|e| CliError::at(&args.model, e))
    })?;
    let queries = args
        .queries
        .iter()
        .map(|p| Ok((file_name(p), read_grid(p)?)))
        .collect::<CliResult<Vec<_>>>()?;
    let results = manifest.time("score", || score_all(&ckpt, &queries, &cfg.score))?;

    let maps_dir = args.out_dir.join(MAPS_DIR);
    create_dir(&maps_dir)?;
    let names: Vec<String> = queries.iter().map(|(n, _)| n.clone()).collect();
    write_atomic(
        &args.out_dir.join(SCORES_FILE),
        scores_csv(&names, &results).as_bytes(),
    )?;
    manifest.time("write_maps", || write_maps(&maps_dir, &stems, &results))?;

    manifest.seed = Some(ckpt.model.config.seed);
    manifest.inputs = std::iter::once(display(&args.model))
        .chain(args.queries.iter().map(|p| display(p)))
        .collect();
    manifest.outputs = std::iter::once(SCORES_FILE.to_string())
        .chain(stems.iter().flat_map(|s| {
            [
                format!("{MAPS_DIR}/{s}.gadt"),
                format!("{MAPS_DIR}/{s}.pgm"),
            ]
        }))
        .collect();
    manifest.train_config = Some(ckpt.model.config.clone());
    manifest.score_config = Some(cfg.score.clone());
    manifest.write(&args.out_dir)?;
    println!(
        "scored {} files into {}",
        results.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn write_maps(dir: &Path, stems: &[String], results: &[AnomalyResult]) -> CliResult<()> {
    for (s, r) in stems.iter().zip(results) {
        let grid = PatchGrid::new(r.map_rows, r.map_cols, 1, r.pixel_map.clone())?;
        let mut bytes = Vec::with_capacity(grid.encoded_len());
        write_tokens(&grid, &mut bytes)?;
        write_atomic(&dir.join(format!("{s}.gadt")), &bytes)?;
        let pgm = dir.join(format!("{s}.pgm"));
        write_pgm16(&r.pixel_map, r.map_rows, r.map_cols, &pgm)
            .map_err(|e| CliError::at(&pgm, e))?;
    }
    Ok(())
}

/// Rows of a two-column CSV with a header line, keyed by file stem.
fn read_two_column_csv(path: &Path, what: &str) -> CliResult<Vec<(String, String)>> {
    let text = read_text(path)?;
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (file, value) = line.rsplit_once(',').ok_or_else(|| {
            CliError::invalid(format!(
                "{}:{}: expected file,{what}",
                path.display(),
                i + 1
            ))
        })?;
        let key = stem(Path::new(file.trim()));
        if !seen.insert(key.clone()) {
            return Err(CliError::invalid(format!(
                "{}:{}: duplicate entry for '{key}'",
                path.display(),
                i + 1
            )));
        }
        rows.push((key, value.trim().to_string()));
    }
    Ok(rows)
}

fn parse_label(value: &str) -> Option<bool> {
    match value.to_ascii_lowercase().as_str() {
        "1" | "true" | "anomalous" | "anomaly" | "defect" => Some(true),
        "0" | "false" | "normal" | "good" => Some(false),
        _ => None,
    }
}

fn orphan_error(what: &str, names: &[String]) -> CliError {
    CliError::invalid(format!("{what}: {}", names.join(", ")))
}

/// Image-level scores joined with labels by file stem.
pub fn join_scores_labels(
    scores: &[(String, f64)],
    labels: &[(String, bool)],
) -> CliResult<LabeledScores> {
    let label_map: BTreeMap<&str, bool> = labels.iter().map(|(k, v)| (k.as_str(), *v)).collect();
    let score_keys: BTreeSet<&str> = scores.iter().map(|(k, _)| k.as_str()).collect();
    let unlabeled: Vec<String> = scores
        .iter()
        .filter(|(k, _)| !label_map.contains_key(k.as_str()))
        .map(|(k, _)| k.clone())
        .collect();
    if !unlabeled.is_empty() {
        return Err(orphan_error("scores without a label", &unlabeled));
    }
    let unscored: Vec<String> = labels
        .iter()
        .filter(|(k, _)| !score_keys.contains(k.as_str()))
        .map(|(k, _)| k.clone())
        .collect();
    if !unscored.is_empty() {
        return Err(orphan_error("labels without a score", &unscored));
    }
    let (values, flags) = scores
        .iter()
        .map(|(k, s)| (*s, label_map[k.as_str()]))
        .unzip();
    Ok(LabeledScores::new(values, flags)?)
}

fn read_scores(path: &Path) -> CliResult<Vec<(String, f64)>> {
    read_two_column_csv(path, "image_score")?
        .into_iter()
        .map(|(k, v)| {
            let score: f64 = v.parse().map_err(|_| {
                CliError::invalid(format!("{}: bad score '{v}' for '{k}'", path.display()))
            })?;
            Ok((k, score))
        })
        .collect()
}

pub fn read_labels(path: &Path) -> CliResult<Vec<(String, bool)>> {
    read_two_column_csv(path, "label")?
        .into_iter()
        .map(|(k, v)| {
            let label = parse_label(&v).ok_or_else(|| {
                CliError::invalid(format!("{}: bad label '{v}' for '{k}'", path.display()))
            })?;
            Ok((k, label))
        })
        .collect()
}

/// Pairs each map with the mask of the same stem, resizing masks
/// (nearest neighbor) to the map's resolution.
pub fn join_maps_masks(
    maps: Vec<(String, PatchGrid)>,
    masks: BTreeMap<String, Mask>,
    allow_missing: bool,
) -> CliResult<Vec<MaskedMap>> {
    let map_keys: BTreeSet<&str> = maps.iter().map(|(k, _)| k.as_str()).collect();
    let orphans: Vec<String> = masks
        .keys()
        .filter(|k| !map_keys.contains(k.as_str()))
        .cloned()
        .collect();
    if !orphans.is_empty() {
        return Err(orphan_error("masks without a map", &orphans));
    }
    if !allow_missing {
        let missing: Vec<String> = maps
            .iter()
            .filter(|(k, _)| !masks.contains_key(k))
            .map(|(k, _)| k.clone())
            .collect();
        if !missing.is_empty() {
            return Err(orphan_error(
                "maps without a mask (pass --allow-missing-masks to treat them as defect-free)",
                &missing,
            ));
        }
    }
    maps.into_iter()
        .map(|(key, grid)| {
            if grid.dim() != 1 {
                return Err(CliError::invalid(format!(
                    "map '{key}' has {} channels, expected 1",
                    grid.dim()
                )));
            }
            let (rows, cols) = (grid.rows(), grid.cols());
            let mask = match masks.get(&key) {
                Some(m) if (m.rows, m.cols) == (rows, cols) => m.clone(),
                Some(m) => m.resize_nearest(rows, cols),
                None => Mask::new(rows, cols, vec![false; rows * cols])?,
            };
            Ok(MaskedMap::new(grid.into_data(), mask)?)
        })
        .collect()
}

fn read_masks(dir: &Path) -> CliResult<BTreeMap<String, Mask>> {
    list_files(dir, "pgm")?
        .into_iter()
        .map(|p| {
            let mask = read_mask_pgm8(&p).map_err(|e| CliError::at(&p, e))?;
            Ok((stem(&p), mask))
        })
        .collect()
}

fn merge(a: MetricsReport, b: MetricsReport) -> MetricsReport {
    MetricsReport {
        image_auroc: a.image_auroc.or(b.image_auroc),
        image_ap: a.image_ap.or(b.image_ap),
        pixel_auroc: a.pixel_auroc.or(b.pixel_auroc),
        pro: a.pro.or(b.pro),
    }
}

pub fn format_report(report: &MetricsReport, format: OutputFormat) -> String {
    match format {
        OutputFormat::Csv => format!("{}\n{}\n", MetricsReport::CSV_HEADER, report.csv_row()),
        OutputFormat::Jsonl => format!(
            "{}\n",
            serde_json::to_string(report).expect("metrics serialize")
        ),
    }
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    if args.scores.is_none() && args.maps.is_none() {
        return Err(CliError::invalid(
            "nothing to evaluate: pass --scores/--labels and/or --maps/--masks",
        ));
    }
    let mut manifest = RunManifest::new("eval");
    let cfg = resolve(args.config.as_deref(), &[Group::Eval], &args.eval.pairs())?;
    let mut report = MetricsReport::default();
    if let (Some(scores), Some(labels)) = (&args.scores, &args.labels) {
        let data = join_scores_labels(&read_scores(scores)?, &read_labels(labels)?)?;
        report = merge(report, manifest.time("image", || image_metrics(&data))?);
        manifest.inputs.extend([display(scores), display(labels)]);
    }
    if let (Some(maps_dir), Some(masks_dir)) = (&args.maps, &args.masks) {
        let maps = list_files(maps_dir, "gadt")?
            .into_iter()
            .map(|p| Ok((stem(&p), read_grid(&p)?)))
            .collect::<CliResult<Vec<_>>>()?;
        let masked = join_maps_masks(maps, read_masks(masks_dir)?, args.allow_missing_masks)?;
        let pixel = manifest.time("pixel", || {
            pixel_metrics(&masked, cfg.eval.fpr_limit, cfg.eval.pro_thresholds)
        })?;
        report = merge(report, pixel);
        manifest
            .inputs
            .extend([display(maps_dir), display(masks_dir)]);
    }
    create_dir(&args.out_dir)?;
    let text = format_report(&report, args.format);
    let name = match args.format {
        OutputFormat::Csv => METRICS_CSV_FILE,
        OutputFormat::Jsonl => METRICS_JSONL_FILE,
    };
    write_atomic(&args.out_dir.join(name), text.as_bytes())?;
    manifest.outputs = vec![name.into()];
    manifest.eval_config = Some(cfg.eval.clone());
    manifest.write(&args.out_dir)?;
    print!("{text}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweep
// ---------------------------------------------------------------------------

/// Grid file contents: swept keys in file order with their values.
pub fn read_grid_file(path: &Path) -> CliResult<Vec<(String, Vec<String>)>> {
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for (line_no, key, value) in read_key_values(path)? {
        let origin = format!("{}:{line_no}", path.display());
        if group_of(&key).is_none() {
            return Err(CliError::invalid(format!(
                "{origin}: unknown setting '{key}'"
            )));
        }
        if key == "seed" {
            return Err(CliError::invalid(format!(
                "{origin}: seed cannot be swept; use --seed for the base seed"
            )));
        }
        if axes.iter().any(|(k, _)| *k == key) {
            return Err(CliError::invalid(format!("{origin}: '{key}' listed twice")));
        }
        let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(CliError::invalid(format!(
                "{origin}: empty value for '{key}'"
            )));
        }
        axes.push((key, values));
    }
    if axes.is_empty() {
        return Err(CliError::invalid(format!(
            "{}: grid has no settings",
            path.display()
        )));
    }
    Ok(axes)
}

/// Cartesian product of the axes; the first axis varies slowest.
pub fn grid_points(axes: &[(String, Vec<String>)]) -> Vec<Vec<(String, String)>> {
    let mut points = vec![Vec::new()];
    for (key, values) in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut next = p.clone();
                    next.push((key.clone(), v.clone()));
                    next
                })
            })
            .collect();
    }
    points
}

/// A benchmark directory: `support/*.gadt`, `test/*.gadt`, `labels.csv`
/// and optionally `masks/*.pgm`.
pub struct Benchmark {
    pub support: Vec<PatchGrid>,
    pub support_paths: Vec<PathBuf>,
    pub test: Vec<(String, PatchGrid)>,
    pub test_stems: Vec<String>,
    pub labels: Vec<(String, bool)>,
    pub masks: Option<BTreeMap<String, Mask>>,
}

impl Benchmark {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let support_paths = list_files(&dir.join("support"), "gadt")?;
        if support_paths.is_empty() {
            return Err(CliError::invalid(format!(
                "{}: no support files",
                dir.display()
            )));
        }
        let support = load_support(&support_paths)?;
        let test_paths = list_files(&dir.join("test"), "gadt")?;
        let test_stems = unique_stems(&test_paths)?;
        let test = test_paths
            .iter()
            .map(|p| Ok((file_name(p), read_grid(p)?)))
            .collect::<CliResult<Vec<_>>>()?;
        let labels = read_labels(&dir.join("labels.csv"))?;
        let masks_dir = dir.join("masks");
        let masks = if masks_dir.is_dir() {
            Some(read_masks(&masks_dir)?)
        } else {
            None
        };
        Ok(Self {
            support,
            support_paths,
            test,
            test_stems,
            labels,
            masks,
        })
    }
}

#[derive(Debug, Clone)]
pub struct PointResult {
    pub outcome_epochs: usize,
    pub best_loss: f32,
    pub report: MetricsReport,
}

/// Train, score and evaluate one configuration on a benchmark.
pub fn run_point(bench: &Benchmark, cfg: &RunConfig) -> CliResult<PointResult> {
    let (outcome, ckpt) = train_on(&bench.support, &cfg.train)?;
    let results = score_all(&ckpt, &bench.test, &cfg.score)?;
    let scores: Vec<(String, f64)> = bench
        .test_stems
        .iter()
        .zip(&results)
        .map(|(s, r)| (s.clone(), r.image_score as f64))
        .collect();
    let mut report = image_metrics(&join_scores_labels(&scores, &bench.labels)?)?;
    if let Some(masks) = &bench.masks {
        let maps = bench
            .test_stems
            .iter()
            .zip(results)
            .map(|(s, r)| {
                Ok((
                    s.clone(),
                    PatchGrid::new(r.map_rows, r.map_cols, 1, r.pixel_map)?,
                ))
            })
            .collect::<CliResult<Vec<_>>>()?;
        let masked = join_maps_masks(maps, masks.clone(), false)?;
        report = merge(
            report,
            pixel_metrics(&masked, cfg.eval.fpr_limit, cfg.eval.pro_thresholds)?,
        );
    }
    Ok(PointResult {
        outcome_epochs: outcome.epochs_run(),
        best_loss: outcome.best_loss,
        report,
    })
}

pub fn sweep_header() -> String {
    let keys: Vec<&str> = TRAIN_KEYS
        .iter()
        .chain(&SCORE_KEYS)
        .chain(&EVAL_KEYS)
        .copied()
        .collect();
    format!(
        "point,{},epochs_run,best_loss,{}",
        keys.join(","),
        MetricsReport::CSV_HEADER
    )
}

fn sweep_row(point: usize, cfg: &RunConfig, result: &PointResult) -> String {
    let values: Vec<String> = TRAIN_KEYS
        .iter()
        .chain(&SCORE_KEYS)
        .chain(&EVAL_KEYS)
        .map(|k| cfg.value_of(k))
        .collect();
    format!(
        "{point},{},{},{},{}",
        values.join(","),
        result.outcome_epochs,
        result.best_loss,
        result.report.csv_row()
    )
}

pub fn cmd_sweep(args: &SweepArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("sweep");
    let all = [Group::Train, Group::Score, Group::Eval];
    let mut base = resolve(args.config.as_deref(), &all, &[])?;
    if let Some(seed) = args.seed {
        base.apply("seed", &seed.to_string(), "--seed")?;
    }
    let axes = read_grid_file(&args.grid)?;
    let points = grid_points(&axes);
    let bench = manifest.time("load", || Benchmark::load(&args.data))?;
    base.train.encoder.input_dim = bench.support[0].dim();

    // resolve every point before training so a bad entry fails fast
    let mut configs = Vec::with_capacity(points.len());
    for (i, point) in points.iter().enumerate() {
        let mut cfg = base.clone();
        for (key, value) in point {
            cfg.apply(
                key,
                value,
                &format!("{} ({key} = {value})", args.grid.display()),
            )?;
        }
        cfg.train.seed = base.train.seed.wrapping_add(i as u64);
        configs.push(cfg);
    }

    create_dir(&args.out_dir)?;
    let mut csv = sweep_header() + "\n";
    let start = Instant::now();
    for (i, cfg) in configs.iter().enumerate() {
        let result = run_point(&bench, cfg)?;
        csv.push_str(&sweep_row(i, cfg, &result));
        csv.push('\n');
        eprintln!(
            "point {}/{}: {}",
            i + 1,
            configs.len(),
            result.report.csv_row()
        );
    }
    manifest
        .timings_ms
        .insert("points".into(), start.elapsed().as_secs_f64() * 1e3);
    write_atomic(&args.out_dir.join(SWEEP_FILE), csv.as_bytes())?;

    manifest.seed = Some(base.train.seed);
    manifest.inputs = std::iter::once(display(&args.grid))
        .chain(bench.support_paths.iter().map(|p| display(p)))
        .chain(std::iter::once(display(&args.data)))
        .collect();
    manifest.outputs = vec![SWEEP_FILE.into()];
    manifest.train_config = Some(base.train.clone());
    manifest.score_config = Some(base.score.clone());
    manifest.eval_config = Some(base.eval.clone());
    manifest
        .summary
        .insert("points".into(), configs.len().into());
    manifest.write(&args.out_dir)?;
    print!("{csv}");
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

/// Support grids use instances from this offset so they never coincide with
/// test grids.
pub const SUPPORT_INSTANCE_BASE: u64 = 1 << 32;

pub fn cmd_synth(args: &SynthArgs) -> CliResult<()> {
    let mut manifest = RunManifest::new("synth");
    if args.support < 1 {
        return Err(CliError::invalid(
            "invalid value for --support: need at least one grid",
        ));
    }
    let base = SynthSpec {
        rows: args.rows,
        cols: args.cols,
        dim: args.dim,
        texture_rank: args.rank,
        noise_sigma: args.noise_sigma,
        anomaly_magnitude: args.magnitude,
        ..SynthSpec::new(args.seed)
    };
    base.validate()?;
    let dirs = ["support", "test", "masks"].map(|d| args.out_dir.join(d));
    for d in &dirs {
        create_dir(d)?;
    }
    let write_grid = |path: PathBuf, grid: &PatchGrid| -> CliResult<String> {
        let mut bytes = Vec::with_capacity(grid.encoded_len());
        write_tokens(grid, &mut bytes)?;
        write_atomic(&path, &bytes)?;
        Ok(display(path.strip_prefix(&args.out_dir).unwrap_or(&path)))
    };
    let mut outputs = Vec::new();
    let mut labels = String::from("file,label\n");
    manifest.time("generate", || -> CliResult<()> {
        for k in 0..args.support {
            let spec = SynthSpec {
                instance: SUPPORT_INSTANCE_BASE + k as u64,
                ..base.clone()
            };
            let name = format!("support_{k:03}.gadt");
            outputs.push(write_grid(dirs[0].join(&name), &generate_normal(&spec)?)?);
        }
        let mut placement = placement_rng(args.seed);
        for i in 0..args.normal + args.anomalous {
            let mut spec = SynthSpec {
                instance: i as u64,
                ..base.clone()
            };
            let anomalous = i >= args.normal;
            let (grid, mask, stem) = if anomalous {
                spec.anomaly_block =
                    random_block(args.rows, args.cols, args.block, args.block, &mut placement)?;
                let (g, m) = generate_anomalous(&spec)?;
                (g, m, format!("anomalous_{:03}", i - args.normal))
            } else {
                let g = generate_normal(&spec)?;
                let m = Mask::new(args.rows, args.cols, vec![false; args.rows * args.cols])?;
                (g, m, format!("normal_{i:03}"))
            };
            outputs.push(write_grid(dirs[1].join(format!("{stem}.gadt")), &grid)?);
            let mask_path = dirs[2].join(format!("{stem}.pgm"));
            write_mask_pgm8(&mask, &mask_path).map_err(|e| CliError::at(&mask_path, e))?;
            outputs.push(format!("masks/{stem}.pgm"));
            let _ = writeln!(labels, "{stem}.gadt,{}", anomalous as u8);
        }
        Ok(())
    })?;
    write_atomic(&args.out_dir.join("labels.csv"), labels.as_bytes())?;
    outputs.push("labels.csv".into());

    manifest.seed = Some(args.seed);
    manifest.outputs = outputs;
    manifest.summary.insert(
        "spec".into(),
        serde_json::to_value(&base).expect("spec serializes"),
    );
    manifest.summary.insert("block".into(), args.block.into());
    manifest.write(&args.out_dir)?;
    println!(
        "wrote {} support, {} normal and {} anomalous grids to {}",
        args.support,
        args.normal,
        args.anomalous,
        args.out_dir.display()
    );
    Ok(())
}
