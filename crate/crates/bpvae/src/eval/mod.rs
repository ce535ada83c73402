//! Scoring and evaluation: turning trained models into per-sample
//! likelihood scores, detection metrics, reconstruction quality reports,
//! and the dataset screening rule.
//!
//! Score semantics are fixed throughout: a score is the single-sample ELBO
//! of an image under a model's basic prior, so HIGHER means the model finds
//! the image more likely. In-distribution data is the positive class for
//! both ranking metrics.
//!
//! CSV conventions used by the command layer: score tables are written as
//! `score,label,dataset` in [`ScoreSet`] row order, metric tables as
//! `metric,value`, and histograms as `bin_left,bin_right,count`.

pub mod metrics;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{ImageDataset, IMAGE_HW, IMAGE_PIXELS};
use crate::models::{Architecture, BpvaeModel, ModelError, TrainConfig, VaeModel, VaeNet};
use crate::tensor::{Tensor, TensorError};

pub use metrics::{histogram, mse, psnr_db, ssim, HistBin, SSIM_C1, SSIM_C2, SSIM_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("empty {what}")]
    Empty { what: String },
    #[error("non-finite {what}")]
    NonFinite { what: String },
    #[error("{reason}")]
    Config { reason: String },
    #[error("score set needs both in-distribution and out-of-distribution rows")]
    OneClass,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Whether a scored sample came from the distribution the model was
/// trained to treat as its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Label {
    Id,
    Ood,
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Id => "id",
            Label::Ood => "ood",
        })
    }
}

/// Columnar table of labeled scores. Rows keep insertion order; the ranking
/// metrics need at least one row of each label.
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    scores: Vec<f64>,
    labels: Vec<Label>,
    datasets: Vec<String>,
}

impl ScoreSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f64, label: Label, dataset: &str) -> Result<(), EvalError> {
        if !score.is_finite() {
            return Err(EvalError::NonFinite {
                what: format!("score {score} for dataset {dataset}"),
            });
        }
        self.scores.push(score);
        self.labels.push(label);
        self.datasets.push(dataset.to_string());
        Ok(())
    }

    pub fn extend(&mut self, scores: &[f32], label: Label, dataset: &str) -> Result<(), EvalError> {
        for &s in scores {
            self.push(s as f64, label, dataset)?;
        }
        Ok(())
    }

    /// Builds a two-class set in one call: `(name, scores)` per side.
    pub fn from_parts(id: (&str, &[f32]), ood: (&str, &[f32])) -> Result<Self, EvalError> {
        let mut set = ScoreSet::new();
        set.extend(id.1, Label::Id, id.0)?;
        set.extend(ood.1, Label::Ood, ood.0)?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = (f64, Label, &str)> + '_ {
        self.scores
            .iter()
            .zip(&self.labels)
            .zip(&self.datasets)
            .map(|((&s, &l), d)| (s, l, d.as_str()))
    }

    pub fn scores_with(&self, label: Label) -> Vec<f64> {
        self.rows()
            .filter(|(_, l, _)| *l == label)
            .map(|(s, _, _)| s)
            .collect()
    }

    fn classes(&self) -> Result<(Vec<f64>, Vec<f64>), EvalError> {
        let id = self.scores_with(Label::Id);
        let ood = self.scores_with(Label::Ood);
        if id.is_empty() || ood.is_empty() {
            return Err(EvalError::OneClass);
        }
        Ok((id, ood))
    }

    /// Probability that an in-distribution sample outscores an
    /// out-of-distribution one, ties counting half.
    pub fn auroc(&self) -> Result<f64, EvalError> {
        let (id, ood) = self.classes()?;
        Ok(metrics::rank_auroc(&id, &ood))
    }

    /// Average precision with in-distribution as the positive class.
    pub fn auprc(&self) -> Result<f64, EvalError> {
        let (id, ood) = self.classes()?;
        Ok(metrics::average_precision(&id, &ood))
    }
}

/// A trained model viewed as a scoring function. Both model kinds score
/// with the ELBO under their basic prior; the two-prior model's simple
/// priors shape training but never the score.
pub trait Scorer {
    fn net(&self) -> &VaeNet;
    fn score_batch(&self, batch: &Tensor, noise: &Tensor) -> Result<Vec<f32>, ModelError>;
    fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor, ModelError>;
}

impl Scorer for VaeModel {
    fn net(&self) -> &VaeNet {
        self.net()
    }
    fn score_batch(&self, batch: &Tensor, noise: &Tensor) -> Result<Vec<f32>, ModelError> {
        self.elbo_batch(batch, noise)
    }
    fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        VaeModel::reconstruct_batch(self, batch)
    }
}

impl Scorer for BpvaeModel {
    fn net(&self) -> &VaeNet {
        self.net()
    }
    fn score_batch(&self, batch: &Tensor, noise: &Tensor) -> Result<Vec<f32>, ModelError> {
        self.elbo_basic_batch(batch, noise)
    }
    fn reconstruct_batch(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        BpvaeModel::reconstruct_batch(self, batch)
    }
}

const SCORE_CHUNK: usize = 128;

/// Scores every image of a dataset deterministically. Sample `i` draws its
/// latent noise from stream `i` of a generator seeded with `seed`, so the
/// score of an image depends only on the seed, the model, and its own
/// index. Truncating the dataset or changing the internal chunking leaves
/// the surviving scores bit-identical.
pub fn score_dataset<M: Scorer + ?Sized>(
    model: &M,
    ds: &ImageDataset,
    seed: u64,
) -> Result<Vec<f32>, EvalError> {
    if !model.net().all_finite() {
        return Err(EvalError::NonFinite {
            what: "model parameters".to_string(),
        });
    }
    let latent = model.net().arch().latent_dim;
    let mut out = Vec::with_capacity(ds.len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + SCORE_CHUNK).min(ds.len());
        let indices: Vec<usize> = (start..end).collect();
        let batch = ds.batch_tensor(&indices);
        let mut noise = Vec::with_capacity((end - start) * latent);
        for i in start..end {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            for _ in 0..latent {
                noise.push(rng.sample::<f32, _>(StandardNormal));
            }
        }
        let noise = Tensor::from_vec(&[end - start, latent], noise)?;
        out.extend(model.score_batch(&batch, &noise)?);
        start = end;
    }
    Ok(out)
}

/// Mean reconstruction quality over a dataset.
#[derive(Debug, Clone, Copy)]
pub struct ReconstructionReport {
    pub mse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
}

impl ReconstructionReport {
    /// `(metric, value)` rows in the order the CSV writer uses.
    pub fn rows(&self) -> [(&'static str, f64); 3] {
        [("mse", self.mse), ("psnr_db", self.psnr_db), ("ssim", self.ssim)]
    }
}

/// Reconstructs every image and averages per-image MSE and SSIM; PSNR is
/// derived from the mean MSE. Returns the stacked reconstructions too so
/// callers can write them out.
pub fn reconstruction_report<M: Scorer + ?Sized>(
    model: &M,
    ds: &ImageDataset,
) -> Result<(Tensor, ReconstructionReport), EvalError> {
    if !model.net().all_finite() {
        return Err(EvalError::NonFinite {
            what: "model parameters".to_string(),
        });
    }
    let mut recon = Vec::with_capacity(ds.pixels().len());
    let mut start = 0;
    while start < ds.len() {
        let end = (start + SCORE_CHUNK).min(ds.len());
        let indices: Vec<usize> = (start..end).collect();
        let probs = model.reconstruct_batch(&ds.batch_tensor(&indices))?;
        recon.extend_from_slice(probs.data());
        start = end;
    }

    let mut mse_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    for i in 0..ds.len() {
        let out = &recon[i * IMAGE_PIXELS..(i + 1) * IMAGE_PIXELS];
        mse_sum += metrics::mse(ds.image(i), out);
        ssim_sum += metrics::ssim(ds.image(i), out, IMAGE_HW, IMAGE_HW)?;
    }
    let n = ds.len() as f64;
    let mean_mse = mse_sum / n;
    let report = ReconstructionReport {
        mse: mean_mse,
        psnr_db: metrics::psnr_db(mean_mse),
        ssim: ssim_sum / n,
    };
    let tensor = Tensor::from_vec(&[ds.len(), 1, IMAGE_HW, IMAGE_HW], recon)?;
    Ok((tensor, report))
}

/// Summary statistic used to compare self-trained score distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectStat {
    Mean,
    Median,
}

impl fmt::Display for SelectStat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectStat::Mean => "mean",
            SelectStat::Median => "median",
        })
    }
}

fn stat_of(scores: &[f32], stat: SelectStat) -> f64 {
    match stat {
        SelectStat::Mean => scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len() as f64,
        SelectStat::Median => {
            let mut v: Vec<f64> = scores.iter().map(|&s| s as f64).collect();
            v.sort_by(|a, b| a.partial_cmp(b).expect("scores are finite"));
            let mid = v.len() / 2;
            // Even counts average the two middle values.
            if v.len().is_multiple_of(2) {
                (v[mid - 1] + v[mid]) / 2.0
            } else {
                v[mid]
            }
        }
    }
}

/// How the screening pass trains and scores each candidate.
#[derive(Debug, Clone)]
pub struct SelectConfig {
    pub arch: Architecture,
    pub train: TrainConfig,
    pub prior_sigma: f32,
    pub score_seed: u64,
    pub stat: SelectStat,
}

impl Default for SelectConfig {
    fn default() -> Self {
        SelectConfig {
            arch: Architecture::default(),
            train: TrainConfig::default(),
            prior_sigma: 1.0,
            score_seed: 0x5E1E,
            stat: SelectStat::Mean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Simple,
    NotSimple,
    Indeterminate,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Simple => "simple",
            Verdict::NotSimple => "not-simple",
            Verdict::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone)]
pub struct SelectEntry {
    pub name: String,
    /// Summary of the candidate's self-trained scores; absent when its
    /// training run diverged.
    pub stat: Option<f64>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone)]
pub struct SelectReport {
    pub stat: SelectStat,
    pub basic_name: String,
    pub basic_stat: Option<f64>,
    pub entries: Vec<SelectEntry>,
}

/// Screens candidate datasets for the simple role. Each dataset, the basic
/// one included, gets its own plain VAE trained on itself under identical
/// settings; a candidate qualifies when the chosen statistic of its
/// self-trained scores is strictly higher than the basic dataset's. An
/// easier-to-model dataset reaches a higher likelihood with the same
/// capacity, so equality or worse means not simple. Any diverged training
/// run yields an indeterminate verdict instead of an error.
pub fn select_simple(
    basic: &ImageDataset,
    candidates: &[&ImageDataset],
    cfg: &SelectConfig,
) -> Result<SelectReport, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::Config {
            reason: "need at least one candidate dataset".to_string(),
        });
    }
    let basic_stat = self_trained_stat(basic, cfg)?;
    let mut entries = Vec::with_capacity(candidates.len());
    for ds in candidates {
        let stat = self_trained_stat(ds, cfg)?;
        let verdict = match (basic_stat, stat) {
            (Some(b), Some(c)) if c > b => Verdict::Simple,
            (Some(_), Some(_)) => Verdict::NotSimple,
            _ => Verdict::Indeterminate,
        };
        entries.push(SelectEntry {
            name: ds.name().to_string(),
            stat,
            verdict,
        });
    }
    Ok(SelectReport {
        stat: cfg.stat,
        basic_name: basic.name().to_string(),
        basic_stat,
        entries,
    })
}

fn self_trained_stat(ds: &ImageDataset, cfg: &SelectConfig) -> Result<Option<f64>, EvalError> {
    let mut train = cfg.train;
    // Small candidate sets still train; the batch just shrinks to fit.
    train.batch_size = train.batch_size.min(ds.len());
    let mut model = VaeModel::new(cfg.arch, cfg.prior_sigma, train.seed)?;
    match model.train(ds, &train) {
        Ok(_) => {}
        Err(ModelError::Diverged { .. }) => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let scores = score_dataset(&model, ds, cfg.score_seed)?;
    Ok(Some(stat_of(&scores, cfg.stat)))
}

/// Train/test score comparison for one model. `ratio` compares the two
/// mean likelihood costs, `mean(-test) / mean(-train)`; a ratio below one
/// means held-out data scored better than the training data itself, which
/// is the suspicious direction, so it raises the flag.
#[derive(Debug, Clone, Copy)]
pub struct GeneralizationReport {
    pub train_mean: f64,
    pub test_mean: f64,
    pub difference: f64,
    pub ratio: f64,
    pub flagged: bool,
}

impl GeneralizationReport {
    pub fn rows(&self) -> [(&'static str, f64); 4] {
        [
            ("train_mean_elbo", self.train_mean),
            ("test_mean_elbo", self.test_mean),
            ("test_minus_train", self.difference),
            ("cost_ratio", self.ratio),
        ]
    }
}

/// Compares mean ELBO scores of training and held-out data. Scores come
/// from [`score_dataset`]; both slices must be nonempty and finite.
pub fn likelihood_ratio_report(
    train_scores: &[f32],
    test_scores: &[f32],
) -> Result<GeneralizationReport, EvalError> {
    for (what, scores) in [("train scores", train_scores), ("test scores", test_scores)] {
        if scores.is_empty() {
            return Err(EvalError::Empty { what: what.to_string() });
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(EvalError::NonFinite { what: what.to_string() });
        }
    }
    let mean = |s: &[f32]| s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
    let train_mean = mean(train_scores);
    let test_mean = mean(test_scores);
    let (neg_train, neg_test) = (-train_mean, -test_mean);
    let ratio = if neg_train == 0.0 {
        if neg_test == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        neg_test / neg_train
    };
    Ok(GeneralizationReport {
        train_mean,
        test_mean,
        difference: test_mean - train_mean,
        ratio,
        flagged: ratio < 1.0,
    })
}
