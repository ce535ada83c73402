//! The command-line surface. Each subcommand parses flags, overlays them
//! on an optional key=value config file (flag beats file beats default),
//! runs the library, and writes plain CSV or PGM outputs.
//!
//! Errors leave through one channel: a single `error: ...` line on stderr
//! and a meaningful exit code. 2 is a configuration problem, 3 a data or
//! file problem, 4 a diverged training run. Flag parsing itself exits
//! with 2 as well.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, CheckpointError};
use crate::config::{
    parse_f32_list, parse_spec_list, read_config_file, ConfigError, DatasetSpec, Overlay,
};
use crate::data::{DataError, ImageDataset, Split, IMAGE_HW};
use crate::eval::{
    histogram, likelihood_ratio_report, reconstruction_report, score_dataset, select_simple,
    EvalError, Label, ScoreSet, SelectConfig, SelectStat,
};
use crate::models::{Architecture, BpvaeModel, ModelError, TrainConfig, VaeModel};
use crate::pgm;

#[derive(Debug)]
pub enum CmdError {
    Config(String),
    Data(String),
    Diverged(String),
}

impl CmdError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CmdError::Config(_) => 2,
            CmdError::Data(_) => 3,
            CmdError::Diverged(_) => 4,
        }
    }
}

impl std::fmt::Display for CmdError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let (CmdError::Config(m) | CmdError::Data(m) | CmdError::Diverged(m)) = self;
        f.write_str(m)
    }
}

impl std::error::Error for CmdError {}

impl From<ConfigError> for CmdError {
    fn from(e: ConfigError) -> Self {
        CmdError::Config(e.to_string())
    }
}

impl From<DataError> for CmdError {
    fn from(e: DataError) -> Self {
        CmdError::Data(e.to_string())
    }
}

impl From<ModelError> for CmdError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } => CmdError::Diverged(e.to_string()),
            other => CmdError::Config(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CmdError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Model(m) => m.into(),
            other => CmdError::Data(other.to_string()),
        }
    }
}

impl From<EvalError> for CmdError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Model(m) => m.into(),
            EvalError::NonFinite { .. } => CmdError::Data(e.to_string()),
            other => CmdError::Config(other.to_string()),
        }
    }
}

/// Trains and evaluates image likelihood models for out-of-distribution
/// detection.
#[derive(Debug, Parser)]
#[command(name = "bpvae", version, about)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and save a checkpoint.
    Train(TrainArgs),
    /// Score in- and out-of-distribution data with a trained model.
    Detect(DetectArgs),
    /// Reconstruct a dataset and report image quality.
    Reconstruct(ReconstructArgs),
    /// Screen candidate datasets for the simple role.
    SelectSimple(SelectArgs),
    /// Compare scores on training and held-out data.
    Report(ReportArgs),
}

/// Every value flag can also live in the config file under its long name;
/// the flag wins when both are present.
#[derive(Debug, Args)]
struct TrainArgs {
    /// Key=value config file supplying defaults for the flags below.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training dataset spec, e.g. synth:noise-texture,complexity=0.8,count=2000,seed=1
    #[arg(long)]
    basic: Option<String>,
    /// Simple dataset specs, ';'-separated. Omit to train a plain VAE.
    #[arg(long)]
    simple: Option<String>,
    /// Latent dimension.
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Encoder channel widths as C1,C2.
    #[arg(long)]
    channels: Option<String>,
    /// Convolution kernel extent (even).
    #[arg(long)]
    kernel: Option<usize>,
    /// Prior sigma for the basic dataset.
    #[arg(long)]
    basic_sigma: Option<f32>,
    /// Prior sigmas for the simple datasets, ';'-separated. One value
    /// broadcasts to all of them.
    #[arg(long)]
    simple_sigma: Option<String>,
    /// Regularize simple batches toward the basic prior instead of their
    /// own narrower one.
    #[arg(long)]
    tie_simple_kl: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Keep only the first N images of every dataset.
    #[arg(long)]
    limit: Option<usize>,
    /// Checkpoint path to write.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV of per-epoch mean loss.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained model checkpoint.
    #[arg(long)]
    model: Option<PathBuf>,
    /// In-distribution dataset spec.
    #[arg(long)]
    id: Option<String>,
    /// Out-of-distribution dataset specs, ';'-separated.
    #[arg(long)]
    ood: Option<String>,
    /// Seed for the per-sample scoring noise.
    #[arg(long)]
    score_seed: Option<u64>,
    /// Keep only the first N images of every dataset.
    #[arg(long)]
    limit: Option<usize>,
    /// Optional CSV of every score: score,label,dataset.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Optional CSV of the summary metrics: metric,value.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Optional CSV of per-label score histograms:
    /// label,bin_left,bin_right,count.
    #[arg(long)]
    hist: Option<PathBuf>,
    #[arg(long)]
    hist_bins: Option<usize>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Dataset spec to reconstruct.
    #[arg(long)]
    data: Option<String>,
    /// Keep only the first N images of the dataset.
    #[arg(long)]
    limit: Option<usize>,
    /// Optional CSV of the quality metrics: metric,value.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Directory for input-vs-output PGM pairs.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
    /// How many pairs to dump.
    #[arg(long)]
    dump_count: Option<usize>,
}

#[derive(Debug, Args)]
struct SelectArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// The dataset currently holding the basic role.
    #[arg(long)]
    basic: Option<String>,
    /// Candidate dataset specs, ';'-separated.
    #[arg(long)]
    candidates: Option<String>,
    /// Prior sigma for every screening model.
    #[arg(long)]
    sigma: Option<f32>,
    /// Score statistic to compare: mean or median.
    #[arg(long)]
    stat: Option<String>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    channels: Option<String>,
    #[arg(long)]
    kernel: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    score_seed: Option<u64>,
    /// Keep only the first N images of every dataset.
    #[arg(long)]
    limit: Option<usize>,
    /// Optional CSV of the report: dataset,stat,verdict.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Spec of the data the model was trained on.
    #[arg(long)]
    train_data: Option<String>,
    /// Spec of held-out data from the same source.
    #[arg(long)]
    test_data: Option<String>,
    #[arg(long)]
    score_seed: Option<u64>,
    /// Keep only the first N images of both datasets.
    #[arg(long)]
    limit: Option<usize>,
    /// Optional CSV: metric,value plus a flagged row.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CmdError> {
    match cli.command {
        Command::Train(args) => train(args),
        Command::Detect(args) => detect(args),
        Command::Reconstruct(args) => reconstruct(args),
        Command::SelectSimple(args) => select(args),
        Command::Report(args) => report(args),
    }
}

fn overlay_for(config: Option<&PathBuf>) -> Result<Overlay, CmdError> {
    Ok(match config {
        Some(path) => Overlay::new(read_config_file(path)?),
        None => Overlay::empty(),
    })
}

fn require<T>(value: Option<T>, flag: &str) -> Result<T, CmdError> {
    value.ok_or_else(|| CmdError::Config(format!("missing required --{flag}")))
}

fn parse_channels(s: &str) -> Result<[usize; 2], CmdError> {
    let parts: Vec<&str> = s.split(',').collect();
    if let [a, b] = parts.as_slice() {
        if let (Ok(a), Ok(b)) = (a.parse(), b.parse()) {
            return Ok([a, b]);
        }
    }
    Err(CmdError::Config(format!(
        "channels want two comma-separated integers, got {s:?}"
    )))
}

fn parse_stat(s: &str) -> Result<SelectStat, CmdError> {
    match s {
        "mean" => Ok(SelectStat::Mean),
        "median" => Ok(SelectStat::Median),
        other => Err(CmdError::Config(format!(
            "unknown stat {other:?}, expected mean or median"
        ))),
    }
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<(), CmdError> {
    let mut text = String::with_capacity(header.len() + rows.iter().map(|r| r.len() + 1).sum::<usize>() + 1);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| CmdError::Data(format!("{}: {e}", path.display())))
}

/// Architecture flags shared by train and select-simple.
fn arch_from(
    overlay: &mut Overlay,
    latent_dim: Option<usize>,
    channels: Option<String>,
    kernel: Option<usize>,
) -> Result<Architecture, CmdError> {
    let defaults = Architecture::default();
    let channels = match overlay.get_opt("channels", channels)? {
        Some(s) => parse_channels(&s)?,
        None => defaults.channels,
    };
    Ok(Architecture {
        input_hw: IMAGE_HW,
        latent_dim: overlay.get("latent-dim", latent_dim, defaults.latent_dim)?,
        channels,
        kernel: overlay.get("kernel", kernel, defaults.kernel)?,
    })
}

fn train_config_from(
    overlay: &mut Overlay,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f32>,
    seed: Option<u64>,
) -> Result<TrainConfig, CmdError> {
    let defaults = TrainConfig::default();
    Ok(TrainConfig {
        epochs: overlay.get("epochs", epochs, defaults.epochs)?,
        batch_size: overlay.get("batch-size", batch_size, defaults.batch_size)?,
        learning_rate: overlay.get("learning-rate", learning_rate, defaults.learning_rate)?,
        seed: overlay.get("seed", seed, defaults.seed)?,
        ..defaults
    })
}

fn clip(ds: ImageDataset, limit: Option<usize>) -> ImageDataset {
    match limit {
        Some(n) => ds.truncated(n),
        None => ds,
    }
}

fn load_list(specs: &str, split: Split, limit: Option<usize>) -> Result<Vec<ImageDataset>, CmdError> {
    parse_spec_list(specs)?
        .iter()
        .map(|s| s.load(split).map(|ds| clip(ds, limit)).map_err(CmdError::from))
        .collect()
}

const DEFAULT_BASIC_SIGMA: f32 = 1.0;
const DEFAULT_SIMPLE_SIGMA: f32 = 0.1;

fn train(args: TrainArgs) -> Result<(), CmdError> {
    let mut overlay = overlay_for(args.config.as_ref())?;
    let basic_spec = require(overlay.get_opt("basic", args.basic)?, "basic")?;
    let simple_specs = overlay.get_opt("simple", args.simple)?;
    let arch = arch_from(&mut overlay, args.latent_dim, args.channels, args.kernel)?;
    let basic_sigma = overlay.get("basic-sigma", args.basic_sigma, DEFAULT_BASIC_SIGMA)?;
    let simple_sigma = overlay.get_opt("simple-sigma", args.simple_sigma)?;
    let mut cfg = train_config_from(
        &mut overlay,
        args.epochs,
        args.batch_size,
        args.learning_rate,
        args.seed,
    )?;
    cfg.simple_kl_to_basic =
        args.tie_simple_kl || overlay.get("tie-simple-kl", None::<bool>, false)?;
    let limit = overlay.get_opt("limit", args.limit)?;
    let out = require(overlay.get_opt("out", args.out)?, "out")?;
    let loss_log: Option<PathBuf> = overlay.get_opt("loss-log", args.loss_log)?;
    overlay.finish().map_err(CmdError::from)?;

    let basic = clip(DatasetSpec::parse(&basic_spec)?.load(Split::Train)?, limit);
    let simples = match &simple_specs {
        Some(s) => load_list(s, Split::Train, limit)?,
        None => Vec::new(),
    };

    let epochs = cfg.epochs;
    let mut progress = |epoch: usize, loss: f32| {
        if !args.quiet {
            println!("epoch {}/{epochs} loss {loss:.3}", epoch + 1);
        }
    };

    let log = if simples.is_empty() {
        if simple_sigma.is_some() {
            return Err(CmdError::Config(
                "--simple-sigma given but no --simple datasets".to_string(),
            ));
        }
        let mut model = VaeModel::new(arch, basic_sigma, cfg.seed)?;
        let log = model.train_with_progress(&basic, &cfg, &mut progress)?;
        checkpoint::save_vae(&out, &model)?;
        log
    } else {
        let sigmas = match simple_sigma {
            Some(list) => {
                let v = parse_f32_list(&list)?;
                if v.len() == 1 {
                    vec![v[0]; simples.len()]
                } else if v.len() == simples.len() {
                    v
                } else {
                    return Err(CmdError::Config(format!(
                        "{} simple sigmas for {} simple datasets",
                        v.len(),
                        simples.len()
                    )));
                }
            }
            None => vec![DEFAULT_SIMPLE_SIGMA; simples.len()],
        };
        let mut model = BpvaeModel::new(arch, basic_sigma, &sigmas, cfg.seed)?;
        let refs: Vec<&ImageDataset> = simples.iter().collect();
        let log = model.train_with_progress(&basic, &refs, &cfg, &mut progress)?;
        checkpoint::save_bpvae(&out, &model)?;
        log
    };

    if let Some(path) = loss_log {
        let rows: Vec<String> = log
            .epoch_mean_loss
            .iter()
            .enumerate()
            .map(|(i, l)| format!("{},{l}", i + 1))
            .collect();
        write_csv(&path, "epoch,loss", &rows)?;
    }
    println!("saved {}", out.display());
    Ok(())
}

fn detect(args: DetectArgs) -> Result<(), CmdError> {
    let mut overlay = overlay_for(args.config.as_ref())?;
    let model_path = require(overlay.get_opt("model", args.model)?, "model")?;
    let id_spec = require(overlay.get_opt("id", args.id)?, "id")?;
    let ood_specs = require(overlay.get_opt("ood", args.ood)?, "ood")?;
    let score_seed = overlay.get("score-seed", args.score_seed, 0u64)?;
    let limit = overlay.get_opt("limit", args.limit)?;
    let scores_out: Option<PathBuf> = overlay.get_opt("scores", args.scores)?;
    let metrics_out: Option<PathBuf> = overlay.get_opt("metrics", args.metrics)?;
    let hist_out: Option<PathBuf> = overlay.get_opt("hist", args.hist)?;
    let hist_bins = overlay.get("hist-bins", args.hist_bins, 20usize)?;
    overlay.finish().map_err(CmdError::from)?;

    let model = checkpoint::load_model(&model_path)?;
    let scorer = model.scorer();

    let id_ds = clip(DatasetSpec::parse(&id_spec)?.load(Split::Test)?, limit);
    let mut set = ScoreSet::new();
    let id_scores = score_dataset(scorer, &id_ds, score_seed)?;
    set.extend(&id_scores, Label::Id, id_ds.name())?;
    let mut ood_total = 0usize;
    for ds in load_list(&ood_specs, Split::Test, limit)? {
        let scores = score_dataset(scorer, &ds, score_seed)?;
        ood_total += scores.len();
        set.extend(&scores, Label::Ood, ds.name())?;
    }

    let auroc = set.auroc()?;
    let auprc = set.auprc()?;
    println!("scored {} id, {ood_total} ood with a {} model", id_scores.len(), model.kind_name());
    println!("auroc {auroc:.6}");
    println!("auprc {auprc:.6}");

    if let Some(path) = scores_out {
        let rows: Vec<String> = set
            .rows()
            .map(|(s, l, d)| format!("{s},{l},{d}"))
            .collect();
        write_csv(&path, "score,label,dataset", &rows)?;
    }
    if let Some(path) = metrics_out {
        let rows = vec![format!("auroc,{auroc}"), format!("auprc,{auprc}")];
        write_csv(&path, "metric,value", &rows)?;
    }
    if let Some(path) = hist_out {
        let mut rows = Vec::new();
        for label in [Label::Id, Label::Ood] {
            for bin in histogram(&set.scores_with(label), hist_bins)? {
                rows.push(format!("{label},{},{},{}", bin.left, bin.right, bin.count));
            }
        }
        write_csv(&path, "label,bin_left,bin_right,count", &rows)?;
    }
    Ok(())
}

fn reconstruct(args: ReconstructArgs) -> Result<(), CmdError> {
    let mut overlay = overlay_for(args.config.as_ref())?;
    let model_path = require(overlay.get_opt("model", args.model)?, "model")?;
    let data_spec = require(overlay.get_opt("data", args.data)?, "data")?;
    let limit = overlay.get_opt("limit", args.limit)?;
    let metrics_out: Option<PathBuf> = overlay.get_opt("metrics", args.metrics)?;
    let dump_dir: Option<PathBuf> = overlay.get_opt("dump-dir", args.dump_dir)?;
    let dump_count = overlay.get("dump-count", args.dump_count, 8usize)?;
    overlay.finish().map_err(CmdError::from)?;

    let model = checkpoint::load_model(&model_path)?;
    let ds = clip(DatasetSpec::parse(&data_spec)?.load(Split::Test)?, limit);
    let (recon, quality) = reconstruction_report(model.scorer(), &ds)?;

    for (name, value) in quality.rows() {
        println!("{name} {value:.6}");
    }
    if let Some(path) = metrics_out {
        let rows: Vec<String> = quality
            .rows()
            .iter()
            .map(|(name, value)| format!("{name},{value}"))
            .collect();
        write_csv(&path, "metric,value", &rows)?;
    }
    if let Some(dir) = dump_dir {
        std::fs::create_dir_all(&dir)
            .map_err(|e| CmdError::Data(format!("{}: {e}", dir.display())))?;
        let px = IMAGE_HW * IMAGE_HW;
        for i in 0..ds.len().min(dump_count) {
            let out = &recon.data()[i * px..(i + 1) * px];
            let pair = pgm::pair_image(ds.image(i), out, IMAGE_HW, IMAGE_HW);
            let path = dir.join(format!("pair-{i:03}.pgm"));
            pgm::write_pgm(&path, &pair, IMAGE_HW, 2 * IMAGE_HW + 1)
                .map_err(|e| CmdError::Data(format!("{}: {e}", path.display())))?;
        }
    }
    Ok(())
}

fn select(args: SelectArgs) -> Result<(), CmdError> {
    let mut overlay = overlay_for(args.config.as_ref())?;
    let basic_spec = require(overlay.get_opt("basic", args.basic)?, "basic")?;
    let candidate_specs = require(overlay.get_opt("candidates", args.candidates)?, "candidates")?;
    let arch = arch_from(&mut overlay, args.latent_dim, args.channels, args.kernel)?;
    let train = train_config_from(
        &mut overlay,
        args.epochs,
        args.batch_size,
        args.learning_rate,
        args.seed,
    )?;
    let sigma = overlay.get("sigma", args.sigma, DEFAULT_BASIC_SIGMA)?;
    let stat = parse_stat(&overlay.get("stat", args.stat, "mean".to_string())?)?;
    let score_seed = overlay.get("score-seed", args.score_seed, 0u64)?;
    let limit = overlay.get_opt("limit", args.limit)?;
    let out: Option<PathBuf> = overlay.get_opt("out", args.out)?;
    overlay.finish().map_err(CmdError::from)?;

    let basic = clip(DatasetSpec::parse(&basic_spec)?.load(Split::Train)?, limit);
    let candidates = load_list(&candidate_specs, Split::Train, limit)?;
    let refs: Vec<&ImageDataset> = candidates.iter().collect();
    let cfg = SelectConfig {
        arch,
        train,
        prior_sigma: sigma,
        score_seed,
        stat,
    };
    let report = select_simple(&basic, &refs, &cfg)?;

    let fmt_stat = |s: Option<f64>| s.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".to_string());
    println!(
        "basic {} {} {}",
        report.basic_name,
        report.stat,
        fmt_stat(report.basic_stat)
    );
    for entry in &report.entries {
        println!(
            "candidate {} {} {} {}",
            entry.name,
            report.stat,
            fmt_stat(entry.stat),
            entry.verdict
        );
    }
    if let Some(path) = out {
        let empty_if_none = |s: Option<f64>| s.map(|v| v.to_string()).unwrap_or_default();
        let mut rows = vec![format!(
            "{},{},basic",
            report.basic_name,
            empty_if_none(report.basic_stat)
        )];
        for entry in &report.entries {
            rows.push(format!(
                "{},{},{}",
                entry.name,
                empty_if_none(entry.stat),
                entry.verdict
            ));
        }
        write_csv(&path, "dataset,stat,verdict", &rows)?;
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), CmdError> {
    let mut overlay = overlay_for(args.config.as_ref())?;
    let model_path = require(overlay.get_opt("model", args.model)?, "model")?;
    let train_spec = require(overlay.get_opt("train-data", args.train_data)?, "train-data")?;
    let test_spec = require(overlay.get_opt("test-data", args.test_data)?, "test-data")?;
    let score_seed = overlay.get("score-seed", args.score_seed, 0u64)?;
    let limit = overlay.get_opt("limit", args.limit)?;
    let out: Option<PathBuf> = overlay.get_opt("out", args.out)?;
    overlay.finish().map_err(CmdError::from)?;

    let model = checkpoint::load_model(&model_path)?;
    let train_ds = clip(DatasetSpec::parse(&train_spec)?.load(Split::Train)?, limit);
    let test_ds = clip(DatasetSpec::parse(&test_spec)?.load(Split::Test)?, limit);
    let train_scores = score_dataset(model.scorer(), &train_ds, score_seed)?;
    let test_scores = score_dataset(model.scorer(), &test_ds, score_seed)?;
    let rep = likelihood_ratio_report(&train_scores, &test_scores)?;

    for (name, value) in rep.rows() {
        println!("{name} {value:.6}");
    }
    println!("flagged {}", rep.flagged);
    if rep.flagged {
        println!("note: held-out data scores above the training data, check for leakage");
    }
    if let Some(path) = out {
        let mut rows: Vec<String> = rep
            .rows()
            .iter()
            .map(|(name, value)| format!("{name},{value}"))
            .collect();
        rows.push(format!("flagged,{}", if rep.flagged { 1 } else { 0 }));
        write_csv(&path, "metric,value", &rows)?;
    }
    Ok(())
}
