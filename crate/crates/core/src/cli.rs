//! Command-line driver: `generate`, `train`, `audit` and `report`.
//!
//! One experiment lives in one output directory:
//!
//! ```text
//! <out>/config.json                 resolved config used by `generate`
//! <out>/dataset/                    dataset.maud + manifest.json
//! <out>/train-<clip>/               checkpoints, training_log.csv, summary
//! <out>/audit-<clip>/               audit.json, exposures.csv, exposure_summary.csv
//! ```

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::audit::{self, AuditContext, AuditReport};
use crate::digest::sha256_hex;
use crate::error::Error;
use crate::model::{decode_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, ModelConfig};
use crate::seed;
use crate::synth::{
    build_vocabulary, load_dataset, make_canary_dataset, save_dataset, CanaryDataset, CanaryPlan,
    RenderConfig,
};
use crate::training::{train_with, CanaryMixing, ClipMode, TrainConfig};

pub const DATASET_DIR: &str = "dataset";
pub const CONFIG_FILE: &str = "config.json";
pub const TRAIN_LOG: &str = "training_log.csv";
pub const TRAIN_SUMMARY: &str = "train_summary.json";
pub const FINAL_CHECKPOINT: &str = "checkpoint-final.mckp";
pub const COMPARISON_CSV: &str = "comparison.csv";

/// Process exit codes. These are part of the command-line contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Failure = 1,
    Config = 2,
    MissingInput = 3,
    Consistency = 4,
    Incompatible = 5,
}

#[derive(Debug)]
pub struct CliError {
    pub code: ExitCode,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl CliError {
    fn new(code: ExitCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn config(message: impl Into<String>) -> Self {
        Self::new(ExitCode::Config, message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::InvalidArgument(_) => ExitCode::Config,
            Error::Consistency(_) => ExitCode::Consistency,
            Error::Incompatible(_) => ExitCode::Incompatible,
            Error::Io(io) if io.kind() == io::ErrorKind::NotFound => ExitCode::MissingInput,
            _ => ExitCode::Failure,
        };
        Self::new(code, e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn missing(path: &Path, what: &str) -> CliError {
    CliError::new(
        ExitCode::MissingInput,
        format!("{what} not found at {}", path.display()),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipKind {
    Baseline,
    PerExample,
    PerCore,
}

impl ClipKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClipKind::Baseline => "baseline",
            ClipKind::PerExample => "per-example",
            ClipKind::PerCore => "per-core",
        }
    }
}

/// Clip bounds are written as JSON numbers, or as the string `"inf"` to
/// disable clipping while keeping the clipped code path.
mod bound {
    use super::*;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() && *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Number(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Number(v) => Ok(v),
            Raw::Text(t) if t == "inf" || t == "infinity" => Ok(f64::INFINITY),
            Raw::Text(t) => Err(serde::de::Error::custom(format!(
                "expected a number or \"inf\", found {t:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabularySection {
    pub size: usize,
    pub seed: u64,
}

impl Default for VocabularySection {
    fn default() -> Self {
        Self { size: 1000, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub clip: ClipKind,
    pub batch_size: usize,
    pub steps: u64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub shuffle_seed: u64,
    pub per_core_batch: usize,
    #[serde(with = "bound")]
    pub per_example_bound: f64,
    #[serde(with = "bound")]
    pub per_core_bound: f64,
    /// Write an intermediate checkpoint every this many steps; 0 keeps only
    /// the final one.
    pub checkpoint_every: u64,
    pub probe_example_norms: bool,
}

impl Default for TrainingSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            clip: ClipKind::Baseline,
            batch_size: t.batch_size,
            steps: t.steps,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            shuffle_seed: t.shuffle_seed,
            per_core_batch: t.per_core_batch,
            per_example_bound: 2.5,
            per_core_bound: 2.5,
            checkpoint_every: 0,
            probe_example_norms: false,
        }
    }
}

impl TrainingSection {
    pub fn clip_mode(&self, kind: ClipKind) -> ClipMode {
        match kind {
            ClipKind::Baseline => ClipMode::Baseline,
            ClipKind::PerExample => ClipMode::PerExample {
                bound: self.per_example_bound,
            },
            ClipKind::PerCore => ClipMode::PerCore {
                bound: self.per_core_bound,
                num_cores: self.batch_size / self.per_core_batch.max(1),
                per_core_batch: self.per_core_batch,
            },
        }
    }

    pub fn train_config(&self, kind: ClipKind) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            steps: self.steps,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            clip: self.clip_mode(kind),
            shuffle_seed: self.shuffle_seed,
            canary_mixing: CanaryMixing::EpochReplication,
            per_core_batch: self.per_core_batch,
            probe_example_norms: self.probe_example_norms,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuditSection {
    /// Overrides `dataset.holdout_size` when set.
    pub holdout_size: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds not given explicitly are derived from this one.
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub vocabulary: VocabularySection,
    pub render: RenderConfig,
    pub dataset: CanaryPlan,
    pub model: ModelConfig,
    pub training: TrainingSection,
    pub audit: AuditSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: CanaryPlan::default().master_seed,
            out_dir: PathBuf::from("memaudit-run"),
            vocabulary: VocabularySection::default(),
            render: RenderConfig::default(),
            dataset: CanaryPlan::default(),
            model: ModelConfig::default(),
            training: TrainingSection::default(),
            audit: AuditSection::default(),
        }
    }
}

/// JSON pointer of each derived seed and the stream it is derived on.
const SEED_SLOTS: [(&str, u64); 5] = [
    ("/vocabulary/seed", 1),
    ("/render/render_seed", 2),
    ("/dataset/master_seed", 3),
    ("/model/init_seed", 4),
    ("/training/shuffle_seed", 5),
];

/// Overrides taken from the command line.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub holdout_size: Option<usize>,
}

impl ExperimentConfig {
    /// Parses a config document, fills in derived seeds and applies
    /// overrides. Errors name the offending key.
    pub fn resolve(text: &str, overrides: &Overrides) -> CliResult<Self> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::config(format!("config is not valid JSON: {e}")))?;
        let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(&value).map_err(|e| {
            let path = e.path().to_string();
            CliError::config(format!("config key `{path}`: {}", e.inner()))
        })?;
        if let Some(s) = overrides.seed {
            cfg.master_seed = s;
        }
        for (pointer, stream) in SEED_SLOTS {
            if overrides.seed.is_some() || value.pointer(pointer).is_none() {
                let derived = seed::derive(cfg.master_seed, stream, 0);
                match pointer {
                    "/vocabulary/seed" => cfg.vocabulary.seed = derived,
                    "/render/render_seed" => cfg.render.render_seed = derived,
                    "/dataset/master_seed" => cfg.dataset.master_seed = derived,
                    "/model/init_seed" => cfg.model.init_seed = derived,
                    _ => cfg.training.shuffle_seed = derived,
                }
            }
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        if let Some(n) = overrides.holdout_size {
            cfg.audit.holdout_size = Some(n);
        }
        if let Some(n) = cfg.audit.holdout_size {
            cfg.dataset.holdout_size = n;
        }
        cfg.audit.holdout_size = Some(cfg.dataset.holdout_size);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| match e.kind() {
                io::ErrorKind::NotFound => missing(p, "config file"),
                _ => CliError::new(ExitCode::Failure, format!("{}: {e}", p.display())),
            })?,
            None => "{}".to_string(),
        };
        Self::resolve(&text, overrides)
    }

    fn validate(&self) -> CliResult<()> {
        let at = |section: &str, e: Error| CliError::config(format!("config section `{section}`: {e}"));
        if self.vocabulary.size == 0 {
            return Err(CliError::config("config key `vocabulary.size`: must be at least 1"));
        }
        self.render.validate().map_err(|e| at("render", e))?;
        self.dataset.validate().map_err(|e| at("dataset", e))?;
        self.model.validate().map_err(|e| at("model", e))?;
        if self.model.feature_dim != self.render.feature_dim {
            return Err(CliError::config(format!(
                "config key `model.feature_dim`: {} does not match render.feature_dim {}",
                self.model.feature_dim, self.render.feature_dim
            )));
        }
        for kind in [ClipKind::Baseline, ClipKind::PerExample, ClipKind::PerCore] {
            self.training
                .train_config(kind)
                .validate()
                .map_err(|e| at("training", e))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Vec<u8> {
        let mut v = serde_json::to_vec_pretty(self).expect("config serializes");
        v.push(b'\n');
        v
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.out_dir.join(DATASET_DIR)
    }

    pub fn train_dir(&self, kind: ClipKind) -> PathBuf {
        self.out_dir.join(format!("train-{}", kind.as_str()))
    }

    pub fn audit_dir(&self, label: &str) -> PathBuf {
        self.out_dir.join(format!("audit-{label}"))
    }
}

#[derive(Debug, Parser)]
#[command(name = "memaudit", version, about = "Canary exposure audits for clipped CTC training")]
pub struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true, env = "MEMAUDIT_THREADS")]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Experiment config (JSON). Defaults are used when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed; re-derives every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the experiment.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub holdout_size: Option<usize>,
}

impl CommonArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            out: self.out.clone(),
            holdout_size: self.holdout_size,
        }
    }

    fn load(&self) -> CliResult<ExperimentConfig> {
        ExperimentConfig::load(self.config.as_deref(), &self.overrides())
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the canary dataset.
    Generate(CommonArgs),
    /// Train a model under one clipping policy.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum)]
        clip: Option<ClipKind>,
    },
    /// Measure canary exposure for a checkpoint.
    Audit {
        #[command(flatten)]
        common: CommonArgs,
        /// Defaults to the final checkpoint of the `--clip` training run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        clip: Option<ClipKind>,
    },
    /// Compare audit reports side by side.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Also write the table as CSV into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool
        .build()
        .map_err(|e| CliError::new(ExitCode::Failure, e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Generate(common) => cmd_generate(&common.load()?).map(|_| ()),
        Command::Train { common, clip } => {
            let cfg = common.load()?;
            cmd_train(&cfg, clip.unwrap_or(cfg.training.clip)).map(|_| ())
        }
        Command::Audit {
            common,
            checkpoint,
            clip,
        } => {
            let cfg = common.load()?;
            let clip = clip.unwrap_or(cfg.training.clip);
            let ckpt = checkpoint.unwrap_or_else(|| cfg.train_dir(clip).join(FINAL_CHECKPOINT));
            cmd_audit(&cfg, &ckpt).map(|_| ())
        }
        Command::Report { reports, out } => {
            let table = cmd_report(&reports, out.as_deref())?;
            print!("{table}");
            Ok(())
        }
    })
}

fn write(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(Error::from)?;
    }
    fs::write(path, bytes).map_err(Error::from)?;
    Ok(())
}

/// Generates the dataset into `<out>/dataset` and returns its SHA-256.
pub fn cmd_generate(cfg: &ExperimentConfig) -> CliResult<String> {
    let vocab = build_vocabulary(cfg.vocabulary.size, cfg.vocabulary.seed)?;
    let ds = make_canary_dataset(&cfg.render, &vocab, &cfg.dataset)?;
    let sha = save_dataset(&ds, &cfg.dataset_dir())?;
    write(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_json())?;
    log::info!(
        "wrote {} utterances to {} (sha256 {sha})",
        ds.canary_count() + ds.holdout.len() + ds.background.len() + ds.validation.len(),
        cfg.dataset_dir().display()
    );
    Ok(sha)
}

/// Loads the experiment's dataset and checks it was generated from `cfg`.
pub fn load_experiment_dataset(cfg: &ExperimentConfig) -> CliResult<(CanaryDataset, String)> {
    let dir = cfg.dataset_dir();
    let container = dir.join(crate::synth::CONTAINER_FILE);
    if !container.exists() {
        return Err(missing(&container, "dataset"));
    }
    let (ds, sha) = load_dataset(&dir)?;
    if ds.plan != cfg.dataset
        || ds.render != cfg.render
        || ds.vocabulary_size != cfg.vocabulary.size
        || ds.vocabulary_seed != cfg.vocabulary.seed
    {
        return Err(CliError::new(
            ExitCode::Consistency,
            format!(
                "dataset in {} was generated from a different config; rerun `generate`",
                dir.display()
            ),
        ));
    }
    Ok((ds, sha))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub clip: String,
    pub steps: u64,
    pub final_loss: f64,
    pub skipped_infeasible: u64,
    pub median_unit_norm: Option<f64>,
    pub median_example_norm: Option<f64>,
    pub mean_step_ms: Option<f64>,
    pub checkpoint_sha256: String,
}

/// Trains under `kind` and writes checkpoints, the CSV log and a summary
/// into `<out>/train-<kind>`.
pub fn cmd_train(cfg: &ExperimentConfig, kind: ClipKind) -> CliResult<TrainSummary> {
    let (ds, dataset_sha) = load_experiment_dataset(cfg)?;
    let dir = cfg.train_dir(kind);
    fs::create_dir_all(&dir).map_err(Error::from)?;
    let mut resolved = cfg.clone();
    resolved.training.clip = kind;
    write(&dir.join(CONFIG_FILE), &resolved.to_json())?;

    let tc = cfg.training.train_config(kind);
    let meta = |step| CheckpointMeta {
        model: cfg.model,
        step,
        dataset_sha256: Some(dataset_sha.clone()),
        clip: Some(kind.as_str().to_string()),
    };
    let every = cfg.training.checkpoint_every;
    let (state, log) = train_with(&ds, &cfg.model, &tc, |state| {
        if every > 0 && state.step % every == 0 && state.step < tc.steps {
            let ckpt = Checkpoint {
                meta: meta(state.step),
                params: state.params.clone(),
            };
            save_checkpoint(&dir.join(format!("checkpoint-{:06}.mckp", state.step)), &ckpt)?;
        }
        if state.step % 100 == 0 {
            log::info!("step {} loss {:.4}", state.step, state.loss_history.last().map_or(f64::NAN, |l| l.1));
        }
        Ok(())
    })?;
    let bytes = save_checkpoint(
        &dir.join(FINAL_CHECKPOINT),
        &Checkpoint {
            meta: meta(state.step),
            params: state.params,
        },
    )?;
    log.write_csv(fs::File::create(dir.join(TRAIN_LOG)).map_err(Error::from)?)?;
    if log.skipped_infeasible > 0 {
        log::warn!("skipped {} infeasible examples", log.skipped_infeasible);
    }
    let summary = TrainSummary {
        clip: kind.as_str().into(),
        steps: state.step,
        final_loss: state.loss_history.last().map_or(f64::NAN, |l| l.1),
        skipped_infeasible: log.skipped_infeasible,
        median_unit_norm: log.median_unit_norm(),
        median_example_norm: log.median_example_norm(),
        mean_step_ms: log.mean_step_ms(1),
        checkpoint_sha256: sha256_hex(&bytes),
    };
    let mut json = serde_json::to_vec_pretty(&summary).map_err(Error::from)?;
    json.push(b'\n');
    write(&dir.join(TRAIN_SUMMARY), &json)?;
    Ok(summary)
}

/// Audits `checkpoint` against the experiment's dataset and writes the
/// report into `<out>/audit-<clip>`.
pub fn cmd_audit(cfg: &ExperimentConfig, checkpoint: &Path) -> CliResult<AuditReport> {
    if !checkpoint.exists() {
        return Err(missing(checkpoint, "checkpoint"));
    }
    let (ds, dataset_sha) = load_experiment_dataset(cfg)?;
    let bytes = fs::read(checkpoint).map_err(Error::from)?;
    let ckpt = decode_checkpoint(&bytes)?;
    if let Some(trained_on) = &ckpt.meta.dataset_sha256 {
        if *trained_on != dataset_sha {
            return Err(CliError::new(
                ExitCode::Consistency,
                format!(
                    "checkpoint was trained on dataset {trained_on}, but {} has {dataset_sha}",
                    cfg.dataset_dir().display()
                ),
            ));
        }
    }
    let label = ckpt.meta.clip.clone().unwrap_or_else(|| "checkpoint".into());
    let mut training = cfg.training.clone();
    if let Ok(kind) = ClipKind::from_str(&label, false) {
        training.clip = kind;
    }
    let ctx = AuditContext {
        checkpoint_sha256: sha256_hex(&bytes),
        dataset_sha256: Some(dataset_sha),
        clip: ckpt.meta.clip.clone(),
        training: serde_json::to_value(&training).map_err(Error::from)?,
    };
    let report = audit::run_audit(&ckpt.params, &ds, &ctx)?;
    let dir = cfg.audit_dir(&label);
    report.save(&dir)?;
    write(&dir.join(CONFIG_FILE), &cfg.to_json())?;
    Ok(report)
}

/// Renders reports as an aligned table of mean ± std exposure per
/// frequency, one column per report.
pub fn cmd_report(paths: &[PathBuf], out: Option<&Path>) -> CliResult<String> {
    let mut reports = Vec::with_capacity(paths.len());
    for p in paths {
        if !p.exists() {
            return Err(missing(p, "report"));
        }
        reports.push(AuditReport::load(p)?);
    }
    let n = reports[0].metadata.holdout_size;
    if let Some((p, r)) = paths
        .iter()
        .zip(&reports)
        .find(|(_, r)| r.metadata.holdout_size != n)
    {
        return Err(CliError::new(
            ExitCode::Incompatible,
            format!(
                "{} has holdout size {}, expected {n}",
                p.display(),
                r.metadata.holdout_size
            ),
        ));
    }
    let labels: Vec<String> = paths
        .iter()
        .zip(&reports)
        .map(|(p, r)| {
            r.metadata.clip.clone().unwrap_or_else(|| {
                p.parent()
                    .and_then(|d| d.file_name())
                    .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
            })
        })
        .collect();
    let mut freqs: Vec<u32> = reports
        .iter()
        .flat_map(|r| r.groups.iter().map(|g| g.frequency))
        .collect();
    freqs.sort_unstable();
    freqs.dedup();

    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut header = vec!["frequency".to_string()];
    header.extend(labels.iter().cloned());
    rows.push(header);
    let mut csv_rows = Vec::new();
    for &k in &freqs {
        let mut row = vec![k.to_string()];
        for (label, r) in labels.iter().zip(&reports) {
            match r.group(k) {
                Some(g) => {
                    row.push(format!("{:.3} ± {:.3}", g.mean, g.std));
                    csv_rows.push((k.to_string(), label.clone(), g.mean, g.std));
                }
                None => row.push("-".into()),
            }
        }
        rows.push(row);
    }
    let bound = (n as f64).log2();
    let mut last = vec!["upper bound".to_string()];
    last.extend(labels.iter().map(|_| format!("{bound:.3}")));
    rows.push(last);

    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut table = String::new();
    for row in &rows {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(cell, &w)| format!("{cell:>w$}"))
            .collect();
        table.push_str(cells.join("  ").trim_end());
        table.push('\n');
    }

    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(Error::from)?;
        let mut w = csv::Writer::from_path(dir.join(COMPARISON_CSV)).map_err(Error::from)?;
        w.write_record(["frequency", "mode", "mean", "std"])
            .map_err(Error::from)?;
        for (k, label, mean, std) in &csv_rows {
            w.write_record([k.clone(), label.clone(), mean.to_string(), std.to_string()])
                .map_err(Error::from)?;
        }
        w.write_record(["upper_bound".into(), String::new(), bound.to_string(), "0".into()])
            .map_err(Error::from)?;
        w.flush().map_err(Error::from)?;
    }
    Ok(table)
}
