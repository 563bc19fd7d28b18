//! Training loop: Adam on the decoder only, cosine learning-rate decay,
//! deterministic batching, and wall-time instrumentation.
//!
//! The encoder never enters a gradient graph. Each sample is encoded once
//! up front (the encoder is frozen, so features cannot go stale) and the
//! cached features re-enter every step as fresh graph leaves. A run is
//! strictly sequential and all randomness derives from the configured
//! seed, so identical configurations reproduce loss trajectories bit for
//! bit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::formats::{self, Mask, Volume};
use crate::losses::{combined_loss, CombinedInputs, LossBreakdown, LossWeights};
use crate::metrics::{calibration_report, dgg, dsc, hd95, BinStat};
use crate::model::{
    build_input, decode, decoder_constants, decoder_leaves, encode, probs_to_mask, ModelConfig, Param, ParamStore,
};
use crate::rng::stream_seed;
use crate::synthdata::{prompt_from_mask, ManifestEntry, Role};

/// Sub-stream tag for per-epoch batch shuffling.
const STREAM_SHUFFLE: u64 = 100;

/// Which penalties of the combined objective a run keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Base objective only.
    SamFt,
    /// Base plus the Fisher information penalty.
    FipOnly,
    /// Base plus the confidence misalignment penalty.
    CmpOnly,
    /// Base plus both penalties.
    Calsam,
}

impl Ablation {
    /// All four ablations in summary-table order.
    pub const ALL: [Ablation; 4] = [Ablation::SamFt, Ablation::FipOnly, Ablation::CmpOnly, Ablation::Calsam];

    /// Zeroes the weights this ablation disables; the remaining weights
    /// keep their configured values.
    pub fn apply(self, w: &LossWeights) -> LossWeights {
        let mut out = w.clone();
        match self {
            Ablation::SamFt => {
                out.lambda_fip = 0.0;
                out.lambda_cmp = 0.0;
            }
            Ablation::FipOnly => out.lambda_cmp = 0.0,
            Ablation::CmpOnly => out.lambda_fip = 0.0,
            Ablation::Calsam => {}
        }
        out
    }

    /// Row label used in summary tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::SamFt => "SAM-FT",
            Ablation::FipOnly => "SAM+FIP",
            Ablation::CmpOnly => "SAM+CMP",
            Ablation::Calsam => "CalSAM",
        }
    }

    /// Directory-friendly name.
    pub fn slug(self) -> &'static str {
        match self {
            Ablation::SamFt => "sam-ft",
            Ablation::FipOnly => "fip-only",
            Ablation::CmpOnly => "cmp-only",
            Ablation::Calsam => "calsam",
        }
    }
}

/// Optimization settings of one training run.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub ablation: Ablation,
    pub weights: LossWeights,
    /// Initial learning rate of the cosine schedule.
    pub lr0: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Seed of a single run; also seeds the decoder initialization.
    pub seed: u64,
    /// Seed set swept by the ablation and evaluation grids.
    pub grid_seeds: Vec<u64>,
    /// Optional global gradient-norm ceiling for rescue runs; uses are
    /// counted in the run record.
    pub max_grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ablation: Ablation::Calsam,
            weights: LossWeights::default(),
            // Sized for the small default corpus: 900 cosine-decayed steps.
            // Full-scale fine-tuning of the same architecture family uses
            // 1e-4, which cannot move the decoder measurably in so few steps.
            lr0: 1e-2,
            epochs: 30,
            batch_size: 2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            grid_seeds: vec![42, 2024, 3407],
            max_grad_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".to_string()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be at least 1".to_string()));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config(format!("adam_eps must be positive, got {}", self.adam_eps)));
        }
        if self.grid_seeds.is_empty() {
            return Err(Error::Config("grid_seeds must not be empty".to_string()));
        }
        if let Some(mx) = self.max_grad_norm {
            if mx <= 0.0 {
                return Err(Error::Config(format!("max_grad_norm must be positive, got {mx}")));
            }
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// The loss weights with this run's ablation applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.apply(&self.weights)
    }
}

/// Cosine decay: `lr0 * 0.5 * (1 + cos(pi * step / total))`. Defined for
/// `0 <= step <= total`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::InvalidArgument("cosine schedule needs at least one step".to_string()));
    }
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule end {total_steps}")));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + phase.cos()))
}

/// Adam with bias correction, one moment pair per parameter tensor.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Param], beta1: f64, beta2: f64, eps: f64) -> Adam {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// Applies one update in place. `grads` must align with `params`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(Error::InvalidArgument("optimizer state does not match parameter list".to_string()));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            if p.data.len() != g.len() {
                return Err(Error::InvalidArgument(format!("gradient length mismatch for {}", p.name)));
            }
            for j in 0..g.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                p.data[j] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One sample prepared for training: encoder features cached as plain
/// buffers, ground truth in both tensor and mask form.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub id: String,
    pub center: usize,
    pub vendor: String,
    pub z: Vec<f64>,
    pub z_shape: [usize; 4],
    /// Mask voxels as 0.0/1.0 in the `[nz, ny, nx]` tensor layout (the
    /// mask's flat buffer reads as that tensor directly).
    pub truth: Vec<f64>,
    pub truth_shape: [usize; 3],
    pub mask: Mask,
}

/// Encodes one volume once and packages everything a training or
/// evaluation step needs. Prompts are derived from the ground-truth mask
/// when the model is prompt-guided.
pub fn prepare_sample(
    cfg: &ModelConfig,
    store: &ParamStore,
    id: &str,
    center: usize,
    vendor: &str,
    volume: &Volume,
    mask: &Mask,
    prompt_sigma_mm: f64,
) -> Result<TrainSample> {
    let prompts = if cfg.guided { Some(prompt_from_mask(mask)?) } else { None };
    let (input, in_shape) = build_input(cfg, volume, prompts.as_ref(), prompt_sigma_mm)?;
    let (z, z_shape) = encode(cfg, store, &input, in_shape)?;
    let [nx, ny, nz] = mask.dims;
    Ok(TrainSample {
        id: id.to_string(),
        center,
        vendor: vendor.to_string(),
        z,
        z_shape,
        truth: mask.data.iter().map(|&v| f64::from(v)).collect(),
        truth_shape: [nz, ny, nx],
        mask: mask.clone(),
    })
}

/// One optimizer step over a batch: batch-mean combined loss, backward
/// through the decoder, optional global-norm clipping, Adam update.
/// Returns the logged components and whether clipping fired. The encoder
/// is never touched. A non-finite component aborts with its name.
pub fn train_step(
    cfg: &ModelConfig,
    store: &mut ParamStore,
    batch: &[&TrainSample],
    weights: &LossWeights,
    adam: &mut Adam,
    lr: f64,
    max_grad_norm: Option<f64>,
    step_index: usize,
) -> Result<(LossBreakdown, bool)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("training batch is empty".to_string()));
    }
    let mut g = Graph::new();
    let leaves = decoder_leaves(&mut g, store)?;
    let mut parts = Vec::with_capacity(batch.len());
    let mut total_sum: Option<Tensor> = None;
    for sample in batch {
        let z = g.leaf(sample.z.clone(), sample.z_shape.to_vec())?;
        let logits = decode(&mut g, cfg, &z, &leaves)?;
        let truth = Tensor::new(sample.truth.clone(), sample.truth_shape.to_vec())?;
        let (total, breakdown) = combined_loss(&mut g, &CombinedInputs { z: &z, logits: &logits, truth: &truth }, weights)?;
        parts.push(breakdown);
        total_sum = Some(match total_sum {
            None => total,
            Some(acc) => g.add(&acc, &total)?,
        });
    }
    let total = g.scale(&total_sum.expect("batch is nonempty"), 1.0 / batch.len() as f64)?;

    let mut breakdown = LossBreakdown::mean_of(&parts);
    breakdown.total = total.item()?;
    if let Some(component) = breakdown.non_finite_component() {
        return Err(Error::NonFinite { component, step: step_index });
    }

    let wrt: Vec<&Tensor> = leaves.tensors.iter().collect();
    let grads = g.backward(&total, &wrt, false)?;
    let mut grad_bufs: Vec<Vec<f64>> = grads.iter().map(|t| t.data().to_vec()).collect();

    let mut clipped = false;
    if let Some(max_norm) = max_grad_norm {
        let norm = grad_bufs.iter().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt();
        if norm > max_norm {
            let factor = max_norm / norm;
            for buf in &mut grad_bufs {
                for v in buf.iter_mut() {
                    *v *= factor;
                }
            }
            clipped = true;
        }
    }

    adam.step(store.decoder_mut(), &grad_bufs, lr)?;
    Ok((breakdown, clipped))
}

/// Loss components averaged over one epoch's steps.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub parts: LossBreakdown,
    /// Learning rate at the epoch's first step.
    pub lr: f64,
}

/// Per-sample evaluation row. `hd95_mm` is `None` when either mask is
/// empty; such samples are excluded from distance averages and counted.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMetrics {
    pub sample_id: String,
    pub domain: &'static str,
    pub vendor: String,
    pub center: usize,
    pub dsc: f64,
    pub hd95_mm: Option<f64>,
    pub ece: f64,
    pub ace: f64,
    pub brier: f64,
}

/// Mean and population standard deviation of each metric over one split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SplitSummary {
    pub n: usize,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    /// `None` when no sample had a defined distance.
    pub hd95_mean: Option<f64>,
    pub hd95_std: Option<f64>,
    pub hd95_undefined: usize,
    pub ece_mean: f64,
    pub ece_std: f64,
    pub ace_mean: f64,
    pub ace_std: f64,
    pub brier_mean: f64,
    pub brier_std: f64,
}

/// Everything one training run produced. Also persisted as a directory of
/// plain artifacts; see [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub ablation: Ablation,
    pub epoch_losses: Vec<EpochLoss>,
    pub step_seconds: Vec<f64>,
    pub clipped_steps: usize,
    pub source: Vec<SampleMetrics>,
    pub target: Vec<SampleMetrics>,
    pub source_summary: SplitSummary,
    pub target_summary: SplitSummary,
    /// Source-minus-target Dice gap (positive = target worse).
    pub dgg_dsc: f64,
    /// Source-minus-target calibration gap (negative = target worse).
    pub dgg_ece: f64,
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
}

/// Borrowed inputs of one training run.
pub struct ExperimentSpec<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    /// Directory holding the volume and mask files of `entries`.
    pub corpus_dir: &'a Path,
    /// Samples with their roles already assigned for this run.
    pub entries: &'a [ManifestEntry],
    pub prompt_sigma_mm: f64,
    /// Calibration bin count for all reports.
    pub m_bins: usize,
    /// Directory this run writes its artifacts into.
    pub run_dir: &'a Path,
    pub config_hash: &'a str,
}

/// The corpus with features already encoded, split by role. Valid for any
/// decoder seed under the same model configuration: features depend only
/// on the frozen encoder.
#[derive(Debug, Clone, Default)]
pub struct PreparedCorpus {
    pub train: Vec<TrainSample>,
    pub source: Vec<TrainSample>,
    pub target: Vec<TrainSample>,
}

/// Reads and encodes every entry once, splitting by role.
pub fn prepare_corpus(
    cfg: &ModelConfig,
    store: &ParamStore,
    corpus_dir: &Path,
    entries: &[ManifestEntry],
    prompt_sigma_mm: f64,
) -> Result<PreparedCorpus> {
    let mut corpus = PreparedCorpus::default();
    for entry in entries {
        let volume = formats::read_volume(&corpus_dir.join(&entry.volume))?;
        let mask = formats::read_mask(&corpus_dir.join(&entry.mask))?;
        let sample = prepare_sample(
            cfg,
            store,
            &entry.spec.id,
            entry.spec.center,
            &entry.spec.vendor.to_string(),
            &volume,
            &mask,
            prompt_sigma_mm,
        )?;
        match entry.spec.role {
            Role::Train => corpus.train.push(sample),
            Role::SourceEval => corpus.source.push(sample),
            Role::TargetEval => corpus.target.push(sample),
        }
    }
    Ok(corpus)
}

/// Trains on the train-role samples, evaluates every metric on the source
/// and target evaluation splits, and persists the run directory:
/// `config.txt`, `losses.csv`, `timing.csv`, `checkpoint.cspt`,
/// `metrics.csv`, pooled `reliability_{source,target}.csv`, `summary.txt`.
pub fn run_experiment(spec: &ExperimentSpec<'_>) -> Result<RunRecord> {
    let store = ParamStore::init(spec.model, spec.train.seed)?;
    let corpus = prepare_corpus(spec.model, &store, spec.corpus_dir, spec.entries, spec.prompt_sigma_mm)?;
    run_experiment_prepared(spec, &corpus)
}

/// [`run_experiment`] with encoding already done; `corpus` must have been
/// prepared under the same model configuration.
pub fn run_experiment_prepared(spec: &ExperimentSpec<'_>, corpus: &PreparedCorpus) -> Result<RunRecord> {
    spec.train.validate()?;
    let store_init = ParamStore::init(spec.model, spec.train.seed)?;
    let encoder_before = store_init.encoder_blob();
    let (train_samples, source_samples, target_samples) = (&corpus.train, &corpus.source, &corpus.target);
    if train_samples.is_empty() {
        return Err(Error::Data("no samples with the train role".to_string()));
    }

    let mut store = store_init;
    let weights = spec.train.effective_weights();
    let mut adam = Adam::new(store.decoder(), spec.train.beta1, spec.train.beta2, spec.train.adam_eps);
    let steps_per_epoch = train_samples.len().div_ceil(spec.train.batch_size);
    let total_steps = spec.train.epochs * steps_per_epoch;

    let mut epoch_losses = Vec::with_capacity(spec.train.epochs);
    let mut step_seconds = Vec::with_capacity(total_steps);
    let mut clipped_steps = 0usize;
    let mut global_step = 0usize;
    for epoch in 0..spec.train.epochs {
        let order = shuffled_indices(train_samples.len(), spec.train.seed, epoch);
        let mut epoch_parts = Vec::with_capacity(steps_per_epoch);
        let mut epoch_lr = 0.0;
        for (b, chunk) in order.chunks(spec.train.batch_size).enumerate() {
            let batch: Vec<&TrainSample> = chunk.iter().map(|&i| &train_samples[i]).collect();
            let lr = cosine_lr(global_step, total_steps, spec.train.lr0)?;
            if b == 0 {
                epoch_lr = lr;
            }
            let started = Instant::now();
            let (parts, clipped) = train_step(
                spec.model,
                &mut store,
                &batch,
                &weights,
                &mut adam,
                lr,
                spec.train.max_grad_norm,
                global_step,
            )?;
            step_seconds.push(started.elapsed().as_secs_f64());
            clipped_steps += usize::from(clipped);
            epoch_parts.push(parts);
            global_step += 1;
        }
        epoch_losses.push(EpochLoss { epoch, parts: LossBreakdown::mean_of(&epoch_parts), lr: epoch_lr });
    }

    // Freeze contract: the encoder bytes must have survived training.
    if store.encoder_blob() != encoder_before {
        return Err(Error::Data("encoder parameters changed during training".to_string()));
    }

    let (source, source_bins) = evaluate_split(spec.model, &store, &source_samples, "source", spec.m_bins)?;
    let (target, target_bins) = evaluate_split(spec.model, &store, &target_samples, "target", spec.m_bins)?;
    let source_summary = summarize(&source);
    let target_summary = summarize(&target);
    let dgg_dsc = dgg(source_summary.dsc_mean, target_summary.dsc_mean);
    let dgg_ece = dgg(source_summary.ece_mean, target_summary.ece_mean);

    let record = RunRecord {
        config_hash: spec.config_hash.to_string(),
        seed: spec.train.seed,
        ablation: spec.train.ablation,
        epoch_losses,
        step_seconds,
        clipped_steps,
        source,
        target,
        source_summary,
        target_summary,
        dgg_dsc,
        dgg_ece,
        run_dir: spec.run_dir.to_path_buf(),
        checkpoint: spec.run_dir.join("checkpoint.cspt"),
    };
    persist_run(spec, &store, &record, &source_bins, &target_bins)?;
    Ok(record)
}

/// Deterministic per-epoch permutation of `0..n`.
fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_SHUFFLE + epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Runs inference on every sample of a split and computes its metric row.
/// Also returns pooled reliability bins over the split's voxels.
fn evaluate_split(
    cfg: &ModelConfig,
    store: &ParamStore,
    samples: &[TrainSample],
    domain: &'static str,
    m_bins: usize,
) -> Result<(Vec<SampleMetrics>, Vec<BinStat>)> {
    let mut rows = Vec::with_capacity(samples.len());
    let mut pooled_probs = Vec::new();
    let mut pooled_labels = Vec::new();
    for sample in samples {
        let probs = predict_probs(cfg, store, sample)?;
        let labels: Vec<u8> = sample.mask.data.clone();
        let pred = probs_to_mask(&probs, sample.mask.dims, sample.mask.spacing)?;
        let report = calibration_report(&probs, &labels, m_bins)?;
        rows.push(SampleMetrics {
            sample_id: sample.id.clone(),
            domain,
            vendor: sample.vendor.clone(),
            center: sample.center,
            dsc: dsc(&pred, &sample.mask)?,
            hd95_mm: hd95(&pred, &sample.mask)?,
            ece: report.ece,
            ace: report.ace,
            brier: report.brier,
        });
        pooled_probs.extend_from_slice(&probs);
        pooled_labels.extend(labels);
    }
    let bins = if pooled_probs.is_empty() {
        Vec::new()
    } else {
        calibration_report(&pooled_probs, &pooled_labels, m_bins)?.bins
    };
    Ok((rows, bins))
}

/// Foreground probabilities for one sample under the current decoder, in
/// mask layout. No gradients are recorded.
pub fn predict_probs(cfg: &ModelConfig, store: &ParamStore, sample: &TrainSample) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let z = Tensor::new(sample.z.clone(), sample.z_shape.to_vec())?;
    let params = decoder_constants(store)?;
    let logits = decode(&mut g, cfg, &z, &params)?;
    let probs = g.sigmoid(&logits)?;
    Ok(probs.data().to_vec())
}

/// Raw logits for one sample under the current decoder, for calibration
/// work that needs the pre-sigmoid values.
pub fn predict_logits(cfg: &ModelConfig, store: &ParamStore, sample: &TrainSample) -> Result<Vec<f64>> {
    let mut g = Graph::inference();
    let z = Tensor::new(sample.z.clone(), sample.z_shape.to_vec())?;
    let params = decoder_constants(store)?;
    let logits = decode(&mut g, cfg, &z, &params)?;
    Ok(logits.data().to_vec())
}

fn summarize(rows: &[SampleMetrics]) -> SplitSummary {
    if rows.is_empty() {
        return SplitSummary::default();
    }
    let stats = |vals: &[f64]| -> (f64, f64) {
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let dscs: Vec<f64> = rows.iter().map(|r| r.dsc).collect();
    let eces: Vec<f64> = rows.iter().map(|r| r.ece).collect();
    let aces: Vec<f64> = rows.iter().map(|r| r.ace).collect();
    let briers: Vec<f64> = rows.iter().map(|r| r.brier).collect();
    let hd95s: Vec<f64> = rows.iter().filter_map(|r| r.hd95_mm).collect();
    let (dsc_mean, dsc_std) = stats(&dscs);
    let (ece_mean, ece_std) = stats(&eces);
    let (ace_mean, ace_std) = stats(&aces);
    let (brier_mean, brier_std) = stats(&briers);
    let (hd95_mean, hd95_std) = if hd95s.is_empty() {
        (None, None)
    } else {
        let (m, s) = stats(&hd95s);
        (Some(m), Some(s))
    };
    SplitSummary {
        n: rows.len(),
        dsc_mean,
        dsc_std,
        hd95_mean,
        hd95_std,
        hd95_undefined: rows.len() - hd95s.len(),
        ece_mean,
        ece_std,
        ace_mean,
        ace_std,
        brier_mean,
        brier_std,
    }
}

/// Pinned artifact headers.
pub const METRICS_HEADER: &str = "sample_id,domain,vendor,center,dsc,hd95_mm,ece,ace,brier";
pub const RELIABILITY_HEADER: &str = "bin_lo,bin_hi,count,accuracy,confidence";
pub const LOSSES_HEADER: &str = "epoch,dice,ce,sam,fip,cmp,total,lr";
pub const TIMING_HEADER: &str = "step,seconds";

fn persist_run(
    spec: &ExperimentSpec<'_>,
    store: &ParamStore,
    record: &RunRecord,
    source_bins: &[BinStat],
    target_bins: &[BinStat],
) -> Result<()> {
    let dir = spec.run_dir;
    let hash = spec.config_hash;

    let mut config_lines = vec![
        format!("config_hash={hash}"),
        format!("ablation={}", record.ablation.slug()),
        format!("seed={}", record.seed),
        format!("lr0={}", spec.train.lr0),
        format!("epochs={}", spec.train.epochs),
        format!("batch_size={}", spec.train.batch_size),
        format!("betas={},{}", spec.train.beta1, spec.train.beta2),
        format!("adam_eps={}", spec.train.adam_eps),
        format!("lambda_fip={}", spec.train.effective_weights().lambda_fip),
        format!("lambda_cmp={}", spec.train.effective_weights().lambda_cmp),
        format!("tau={}", spec.train.weights.tau),
        format!("gamma={}", spec.train.weights.gamma),
        format!("m_bins={}", spec.m_bins),
        format!("prompt_sigma_mm={}", spec.prompt_sigma_mm),
        format!("clipped_steps={}", record.clipped_steps),
    ];
    if let Some(mx) = spec.train.max_grad_norm {
        config_lines.push(format!("max_grad_norm={mx}"));
    }
    formats::write_atomic(&dir.join("config.txt"), (config_lines.join("\n") + "\n").as_bytes())?;

    let loss_rows: Vec<String> = record
        .epoch_losses
        .iter()
        .map(|e| {
            format!(
                "{},{},{},{},{},{},{},{}",
                e.epoch, e.parts.dice, e.parts.ce, e.parts.sam, e.parts.fip, e.parts.cmp, e.parts.total, e.lr
            )
        })
        .collect();
    formats::write_csv(&dir.join("losses.csv"), hash, LOSSES_HEADER, &loss_rows)?;

    let timing_rows: Vec<String> =
        record.step_seconds.iter().enumerate().map(|(i, s)| format!("{i},{s}")).collect();
    formats::write_csv(&dir.join("timing.csv"), hash, TIMING_HEADER, &timing_rows)?;

    formats::write_checkpoint(&record.checkpoint, &store.to_checkpoint(hash))?;

    let metric_rows: Vec<String> = record.source.iter().chain(&record.target).map(metrics_row).collect();
    formats::write_csv(&dir.join("metrics.csv"), hash, METRICS_HEADER, &metric_rows)?;

    formats::write_csv(&dir.join("reliability_source.csv"), hash, RELIABILITY_HEADER, &bin_rows(source_bins))?;
    formats::write_csv(&dir.join("reliability_target.csv"), hash, RELIABILITY_HEADER, &bin_rows(target_bins))?;

    let s = &record.source_summary;
    let t = &record.target_summary;
    let fmt_split = |name: &str, s: &SplitSummary| -> String {
        let hd = match (s.hd95_mean, s.hd95_std) {
            (Some(m), Some(sd)) => format!("{m:.4} ± {sd:.4} ({} undefined)", s.hd95_undefined),
            _ => format!("undefined ({} undefined)", s.hd95_undefined),
        };
        format!(
            "[{name}] n={}\n  dsc   {:.4} ± {:.4}\n  hd95  {hd}\n  ece   {:.4} ± {:.4}\n  ace   {:.4} ± {:.4}\n  brier {:.4} ± {:.4}\n",
            s.n, s.dsc_mean, s.dsc_std, s.ece_mean, s.ece_std, s.ace_mean, s.ace_std, s.brier_mean, s.brier_std
        )
    };
    let summary = format!(
        "config_hash={hash}\nablation={}\nseed={}\n{}{}dgg_dsc={:.6}\ndgg_ece={:.6}\nclipped_steps={}\n",
        record.ablation.label(),
        record.seed,
        fmt_split("source", s),
        fmt_split("target", t),
        record.dgg_dsc,
        record.dgg_ece,
        record.clipped_steps,
    );
    formats::write_atomic(&dir.join("summary.txt"), summary.as_bytes())
}

fn metrics_row(r: &SampleMetrics) -> String {
    let hd = r.hd95_mm.map(|v| v.to_string()).unwrap_or_default();
    format!("{},{},{},{},{},{},{},{},{}", r.sample_id, r.domain, r.vendor, r.center, r.dsc, hd, r.ece, r.ace, r.brier)
}

fn bin_rows(bins: &[BinStat]) -> Vec<String> {
    bins.iter().map(|b| format!("{},{},{},{},{}", b.lo, b.hi, b.count, b.accuracy, b.confidence)).collect()
}

/// Step-time comparison between a run with the Fisher penalty and one
/// without, everything else identical.
#[derive(Debug, Clone, PartialEq)]
pub struct OverheadReport {
    /// Median step time with the penalty over median without.
    pub ratio: f64,
    pub with_fip_median_s: f64,
    pub without_fip_median_s: f64,
    pub steps: usize,
    pub warmup: usize,
}

/// Measures the Fisher penalty's training-time overhead: two fresh runs
/// over the same batch, identical except for the penalty weight, timed for
/// `steps` steps each after `warmup` untimed steps. The learning rate is
/// held constant; only step cost matters here.
pub fn measure_overhead(
    cfg: &ModelConfig,
    train: &TrainConfig,
    samples: &[&TrainSample],
    steps: usize,
    warmup: usize,
) -> Result<OverheadReport> {
    train.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("overhead measurement needs at least one sample".to_string()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("overhead measurement needs at least one timed step".to_string()));
    }
    let batch: Vec<&TrainSample> = samples.iter().copied().take(train.batch_size).collect();

    let time_arm = |lambda_fip: f64| -> Result<f64> {
        let mut weights = train.effective_weights();
        weights.lambda_fip = lambda_fip;
        let mut store = ParamStore::init(cfg, train.seed)?;
        let mut adam = Adam::new(store.decoder(), train.beta1, train.beta2, train.adam_eps);
        let mut times = Vec::with_capacity(steps);
        for step in 0..warmup + steps {
            let started = Instant::now();
            train_step(cfg, &mut store, &batch, &weights, &mut adam, train.lr0, train.max_grad_norm, step)?;
            if step >= warmup {
                times.push(started.elapsed().as_secs_f64());
            }
        }
        Ok(median(&mut times))
    };

    let with_fip = if train.weights.lambda_fip > 0.0 { train.weights.lambda_fip } else { LossWeights::default().lambda_fip };
    let with_fip_median_s = time_arm(with_fip)?;
    let without_fip_median_s = time_arm(0.0)?;
    Ok(OverheadReport {
        ratio: with_fip_median_s / without_fip_median_s,
        with_fip_median_s,
        without_fip_median_s,
        steps,
        warmup,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median of a sample of f64 values without mutating the input.
pub fn median_of(values: &[f64]) -> f64 {
    let mut copy = values.to_vec();
    median(&mut copy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{bce_loss, dice_loss};

    #[test]
    fn cosine_schedule_closed_forms() {
        assert_eq!(cosine_lr(0, 100, 1e-4).unwrap(), 1e-4);
        assert!((cosine_lr(50, 100, 1e-4).unwrap() - 5e-5).abs() < 1e-19);
        assert!(cosine_lr(100, 100, 1e-4).unwrap().abs() < 1e-19);
        assert!(cosine_lr(101, 100, 1e-4).is_err());
        assert!(cosine_lr(0, 0, 1e-4).is_err());
    }

    #[test]
    fn ablations_zero_the_right_weights() {
        let w = LossWeights::default();
        let sam = Ablation::SamFt.apply(&w);
        assert_eq!((sam.lambda_fip, sam.lambda_cmp), (0.0, 0.0));
        let fip = Ablation::FipOnly.apply(&w);
        assert_eq!((fip.lambda_fip, fip.lambda_cmp), (w.lambda_fip, 0.0));
        let cmp = Ablation::CmpOnly.apply(&w);
        assert_eq!((cmp.lambda_fip, cmp.lambda_cmp), (0.0, w.lambda_cmp));
        assert_eq!(Ablation::Calsam.apply(&w), w);
    }

    #[test]
    fn adam_first_step_moves_against_the_gradient_sign() {
        let mut params = vec![Param { name: "p".to_string(), shape: vec![2], data: vec![0.0, 1.0] }];
        let mut adam = Adam::new(&params, 0.9, 0.999, 1e-8);
        let grads = vec![vec![1.0, -2.0]];
        adam.step(&mut params, &grads, 0.01).unwrap();
        // Bias correction makes the first step lr * g / (|g| + eps).
        assert!((params[0].data[0] - (-0.01)).abs() < 1e-9);
        assert!((params[0].data[1] - 1.01).abs() < 1e-9);
    }

    /// Tiny guided-off model over an 8-cube, with a soft blob target.
    fn tiny_setup() -> (ModelConfig, ParamStore, TrainSample) {
        let cfg = ModelConfig { guided: false, enc_channels: 3, dec_channels: 2, patch: 2, encoder_seed: 11 };
        let store = ParamStore::init(&cfg, 42).unwrap();
        let dims = [8usize, 8, 8];
        let n = 512;
        let mut vol = vec![0.0; n];
        let mut mask = vec![0u8; n];
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let d2 = (x as f64 - 3.5).powi(2) + (y as f64 - 3.5).powi(2) + (z as f64 - 3.5).powi(2);
                    let idx = x + 8 * (y + 8 * z);
                    vol[idx] = (1.0 - d2 / 16.0).max(0.0);
                    mask[idx] = u8::from(d2 <= 6.25);
                }
            }
        }
        let volume = Volume::new(dims, [1.0; 3], vol).unwrap();
        let mask = Mask::new(dims, [1.0; 3], mask).unwrap();
        let sample = prepare_sample(&cfg, &store, "t0", 0, "A", &volume, &mask, 2.0).unwrap();
        (cfg, store, sample)
    }

    #[test]
    fn loss_decreases_over_fifty_steps_on_one_batch() {
        let (cfg, mut store, sample) = tiny_setup();
        let weights = LossWeights::default();
        let mut adam = Adam::new(store.decoder(), 0.9, 0.999, 1e-8);
        let mut first = None;
        let mut last = 0.0;
        for step in 0..50 {
            let (parts, _) =
                train_step(&cfg, &mut store, &[&sample], &weights, &mut adam, 5e-3, None, step).unwrap();
            if first.is_none() {
                first = Some(parts.total);
            }
            last = parts.total;
        }
        let first = first.unwrap();
        assert!(last < first, "loss {first} -> {last} did not decrease");
    }

    #[test]
    fn training_never_touches_the_encoder() {
        let (cfg, mut store, sample) = tiny_setup();
        let before = store.encoder_blob();
        let weights = LossWeights::default();
        let mut adam = Adam::new(store.decoder(), 0.9, 0.999, 1e-8);
        for step in 0..3 {
            train_step(&cfg, &mut store, &[&sample], &weights, &mut adam, 1e-3, None, step).unwrap();
        }
        assert_eq!(store.encoder_blob(), before);
    }

    #[test]
    fn plain_step_matches_a_reference_implementation() {
        // lambda = 0 must reduce to a plain Dice+BCE step. The reference
        // rebuilds that step from loss primitives and its own Adam update.
        let (cfg, store, sample) = tiny_setup();

        let mut lib_store = store.clone();
        let weights = Ablation::SamFt.apply(&LossWeights::default());
        let mut adam = Adam::new(lib_store.decoder(), 0.9, 0.999, 1e-8);
        train_step(&cfg, &mut lib_store, &[&sample], &weights, &mut adam, 1e-3, None, 0).unwrap();

        let mut ref_store = store.clone();
        let mut g = Graph::new();
        let leaves = decoder_leaves(&mut g, &ref_store).unwrap();
        let z = g.leaf(sample.z.clone(), sample.z_shape.to_vec()).unwrap();
        let logits = decode(&mut g, &cfg, &z, &leaves).unwrap();
        let truth = Tensor::new(sample.truth.clone(), sample.truth_shape.to_vec()).unwrap();
        let probs = g.sigmoid(&logits).unwrap();
        let d = dice_loss(&mut g, &probs, &truth).unwrap();
        let b = bce_loss(&mut g, &probs, &truth).unwrap();
        let sum = g.add(&d, &b).unwrap();
        let total = g.scale(&sum, 1.0).unwrap();
        let wrt: Vec<&Tensor> = leaves.tensors.iter().collect();
        let grads = g.backward(&total, &wrt, false).unwrap();
        let (beta1, beta2, eps, lr) = (0.9, 0.999, 1e-8, 1e-3);
        for (p, grad) in ref_store.decoder_mut().iter_mut().zip(&grads) {
            for (v, &gj) in p.data.iter_mut().zip(grad.data()) {
                // First Adam step with zero state, written out longhand.
                let m = (1.0 - beta1) * gj / (1.0 - beta1);
                let vv = (1.0 - beta2) * gj * gj / (1.0 - beta2);
                *v -= lr * m / (vv.sqrt() + eps);
            }
        }

        for (a, b) in lib_store.decoder().iter().zip(ref_store.decoder()) {
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y).abs() < 1e-15, "{} diverged: {x} vs {y}", a.name);
            }
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_the_component_named() {
        // Poison the truth buffer: a NaN in z would be absorbed by the
        // decoder's relu (IEEE max returns the non-NaN operand).
        let (cfg, mut store, mut sample) = tiny_setup();
        sample.truth[0] = f64::NAN;
        let weights = LossWeights::default();
        let mut adam = Adam::new(store.decoder(), 0.9, 0.999, 1e-8);
        let err = train_step(&cfg, &mut store, &[&sample], &weights, &mut adam, 1e-3, None, 7).unwrap_err();
        match err {
            Error::NonFinite { component, step } => {
                assert_eq!(component, "dice");
                assert_eq!(step, 7);
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn gradient_clipping_fires_only_below_the_ceiling() {
        let (cfg, store, sample) = tiny_setup();
        let weights = LossWeights::default();

        let mut loose = store.clone();
        let mut adam = Adam::new(loose.decoder(), 0.9, 0.999, 1e-8);
        let (_, clipped) =
            train_step(&cfg, &mut loose, &[&sample], &weights, &mut adam, 1e-3, Some(1e9), 0).unwrap();
        assert!(!clipped);

        let mut tight = store.clone();
        let mut adam = Adam::new(tight.decoder(), 0.9, 0.999, 1e-8);
        let (_, clipped) =
            train_step(&cfg, &mut tight, &[&sample], &weights, &mut adam, 1e-3, Some(1e-9), 0).unwrap();
        assert!(clipped);
    }

    #[test]
    fn train_steps_are_bit_reproducible() {
        let (cfg, store, sample) = tiny_setup();
        let run = || -> Vec<u64> {
            let mut s = store.clone();
            let weights = LossWeights::default();
            let mut adam = Adam::new(s.decoder(), 0.9, 0.999, 1e-8);
            for step in 0..3 {
                train_step(&cfg, &mut s, &[&sample], &weights, &mut adam, 1e-3, None, step).unwrap();
            }
            s.decoder().iter().flat_map(|p| p.data.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn shuffle_is_a_deterministic_permutation() {
        let a = shuffled_indices(10, 42, 3);
        let b = shuffled_indices(10, 42, 3);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        // Different epochs reshuffle.
        assert_ne!(shuffled_indices(10, 42, 3), shuffled_indices(10, 42, 4));
    }

    #[test]
    fn median_handles_odd_and_even_lengths() {
        assert_eq!(median_of(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median_of(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
