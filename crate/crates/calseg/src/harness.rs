//! Multi-run orchestration: the four-way ablation sweep over the seed
//! grid, the calibration-method comparison, bound evaluation from a
//! trained checkpoint, and fold assembly for the leave-one-center-out
//! protocol. Each entry point persists its summary next to the runs it
//! owns and returns the structured results for callers that want to
//! assert on them.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::bounds::{ece_bound, estimate_epsilon, estimate_fisher_trace, pac_bayes_bound, BoundInputs, FeatureSample};
use crate::config::RootConfig;
use crate::error::{Error, Result};
use crate::formats;
use crate::losses::BaseLoss;
use crate::metrics::{calibration_report, logistic, temperature_scale};
use crate::model::{probs_to_mask, ParamStore};
use crate::synthdata::{ManifestEntry, Role, SplitPlan};
use crate::trainer::{
    measure_overhead, median_of, predict_logits, predict_probs, prepare_corpus, run_experiment_prepared,
    Ablation, ExperimentSpec, OverheadReport, RunRecord, TrainSample,
};

/// Mean and population standard deviation over the seed grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridCell {
    pub mean: f64,
    pub std: f64,
}

fn cell(values: &[f64]) -> GridCell {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    GridCell { mean, std: var.sqrt() }
}

impl std::fmt::Display for GridCell {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} \u{b1} {:.4}", self.mean, self.std)
    }
}

/// One method row of the ablation summary: target-split metrics and the
/// domain generalization gap, aggregated over seeds.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub dsc: GridCell,
    /// `None` when no run of this method had a defined surface distance.
    pub hd95: Option<GridCell>,
    pub ece: GridCell,
    /// Gap in Dice between the source and target splits.
    pub dgg: GridCell,
}

/// Everything the ablation sweep produced.
#[derive(Debug)]
pub struct AblationGrid {
    pub config_hash: String,
    /// Four rows in fixed method order.
    pub rows: Vec<AblationRow>,
    /// All underlying runs (methods x seeds).
    pub runs: Vec<RunRecord>,
    pub overhead: OverheadReport,
    /// Median over seeds of the target feature Fisher trace after
    /// training, per method endpoint.
    pub fisher_trace_sam_ft: f64,
    pub fisher_trace_calsam: f64,
    /// Whether the full objective ended with the smaller trace. Reported,
    /// not asserted: the mechanism is intended but not guaranteed.
    pub fisher_suppressed: bool,
}

/// How many overhead steps the grid times by default.
pub const OVERHEAD_STEPS: usize = 100;
pub const OVERHEAD_WARMUP: usize = 10;

/// Runs the full ablation sweep: every method in [`Ablation::ALL`] crossed
/// with every seed in `grid_seeds`, one run directory each under
/// `out_dir`, plus `ablation_summary.csv` and `ablation_summary.txt`.
/// Also times the step overhead of the Fisher penalty and compares the
/// post-training feature Fisher traces of the two method endpoints.
pub fn run_ablation_grid(
    cfg: &RootConfig,
    config_hash: &str,
    corpus_dir: &Path,
    entries: &[ManifestEntry],
    out_dir: &Path,
    overhead_steps: usize,
    overhead_warmup: usize,
) -> Result<AblationGrid> {
    cfg.validate()?;
    // One shared encoding pass serves every run: features depend only on
    // the frozen encoder, never on the per-run decoder seed.
    let store = ParamStore::init(&cfg.model, cfg.train.seed)?;
    let corpus = prepare_corpus(&cfg.model, &store, corpus_dir, entries, cfg.data.gaussian_sigma_mm)?;
    let mut runs = Vec::with_capacity(Ablation::ALL.len() * cfg.train.grid_seeds.len());
    for ablation in Ablation::ALL {
        for &seed in &cfg.train.grid_seeds {
            let mut train = cfg.train.clone();
            train.ablation = ablation;
            train.seed = seed;
            let run_dir = out_dir.join(format!("run-{}-seed{}", ablation.slug(), seed));
            std::fs::create_dir_all(&run_dir)
                .map_err(|e| Error::Data(format!("cannot create {}: {e}", run_dir.display())))?;
            runs.push(run_experiment_prepared(
                &ExperimentSpec {
                    model: &cfg.model,
                    train: &train,
                    corpus_dir,
                    entries,
                    prompt_sigma_mm: cfg.data.gaussian_sigma_mm,
                    m_bins: cfg.metrics.bins,
                    run_dir: &run_dir,
                    config_hash,
                },
                &corpus,
            )?);
        }
    }

    let mut rows = Vec::with_capacity(Ablation::ALL.len());
    for ablation in Ablation::ALL {
        let of_method: Vec<&RunRecord> = runs.iter().filter(|r| r.ablation == ablation).collect();
        let dsc: Vec<f64> = of_method.iter().map(|r| r.target_summary.dsc_mean).collect();
        let ece: Vec<f64> = of_method.iter().map(|r| r.target_summary.ece_mean).collect();
        let dgg: Vec<f64> = of_method.iter().map(|r| r.dgg_dsc).collect();
        let hd95: Vec<f64> = of_method.iter().filter_map(|r| r.target_summary.hd95_mean).collect();
        rows.push(AblationRow {
            ablation,
            dsc: cell(&dsc),
            hd95: if hd95.is_empty() { None } else { Some(cell(&hd95)) },
            ece: cell(&ece),
            dgg: cell(&dgg),
        });
    }

    // Overhead timing reuses the sweep's training data and model setup.
    let refs: Vec<&TrainSample> = corpus.train.iter().take(cfg.train.batch_size).collect();
    let overhead = measure_overhead(&cfg.model, &cfg.train, &refs, overhead_steps, overhead_warmup)?;

    // Post-training feature sensitivity on the target split, per endpoint.
    let trace_median = |ablation: Ablation| -> Result<f64> {
        let mut per_seed = Vec::new();
        for run in runs.iter().filter(|r| r.ablation == ablation) {
            let trained = ParamStore::from_checkpoint(&formats::read_checkpoint(&run.checkpoint)?)?;
            let views: Vec<FeatureSample<'_>> = corpus
                .target
                .iter()
                .map(|s| FeatureSample {
                    z: &s.z,
                    z_shape: s.z_shape,
                    truth: &s.truth,
                    truth_shape: s.truth_shape,
                })
                .collect();
            per_seed.push(estimate_fisher_trace(&cfg.model, &trained, &views, cfg.bounds.max_fisher_samples)?);
        }
        Ok(median_of(&per_seed))
    };
    let fisher_trace_sam_ft = trace_median(Ablation::SamFt)?;
    let fisher_trace_calsam = trace_median(Ablation::Calsam)?;

    let grid = AblationGrid {
        config_hash: config_hash.to_string(),
        rows,
        runs,
        overhead,
        fisher_trace_sam_ft,
        fisher_trace_calsam,
        fisher_suppressed: fisher_trace_calsam <= fisher_trace_sam_ft,
    };
    formats::write_csv(&out_dir.join("ablation_summary.csv"), config_hash, ABLATION_HEADER, &ablation_csv_rows(&grid))?;
    formats::write_atomic(&out_dir.join("ablation_summary.txt"), ablation_text(&grid).as_bytes())?;
    Ok(grid)
}

pub const ABLATION_HEADER: &str =
    "method,dsc_mean,dsc_std,hd95_mean,hd95_std,ece_mean,ece_std,dgg_dsc_mean,dgg_dsc_std";

fn ablation_csv_rows(grid: &AblationGrid) -> Vec<String> {
    grid.rows
        .iter()
        .map(|r| {
            let (hm, hs) = match r.hd95 {
                Some(c) => (c.mean.to_string(), c.std.to_string()),
                None => (String::new(), String::new()),
            };
            format!(
                "{},{},{},{hm},{hs},{},{},{},{}",
                r.ablation.label(),
                r.dsc.mean,
                r.dsc.std,
                r.ece.mean,
                r.ece.std,
                r.dgg.mean,
                r.dgg.std
            )
        })
        .collect()
}

/// Aligned plain-text rendering of the ablation summary, with the
/// overhead and feature-sensitivity report lines underneath.
pub fn ablation_text(grid: &AblationGrid) -> String {
    let mut out = String::new();
    out.push_str(&format!("config_hash={}\n", grid.config_hash));
    out.push_str(&format!("target-split metrics, mean \u{b1} std over {} seeds\n\n", grid.runs.len() / grid.rows.len().max(1)));
    out.push_str(&format!("{:<9} {:>17} {:>17} {:>17} {:>17}\n", "method", "dsc", "hd95 (mm)", "ece", "dgg (dsc)"));
    for r in &grid.rows {
        let hd = match r.hd95 {
            Some(c) => format!("{c}"),
            None => "undefined".to_string(),
        };
        out.push_str(&format!("{:<9} {:>17} {:>17} {:>17} {:>17}\n", r.ablation.label(), format!("{}", r.dsc), hd, format!("{}", r.ece), format!("{}", r.dgg)));
    }
    out.push('\n');
    out.push_str(&format!(
        "feature Fisher trace on target features, median over seeds: SAM-FT {:.6e}, CalSAM {:.6e} -> {}\n",
        grid.fisher_trace_sam_ft,
        grid.fisher_trace_calsam,
        if grid.fisher_suppressed { "suppressed" } else { "NOT suppressed (flagged)" }
    ));
    out.push_str(&format!(
        "fisher-penalty step-time overhead: {:.2}x (median over {} steps, {} warmup); full-scale reference point: 1.15x\n",
        grid.overhead.ratio, grid.overhead.steps, grid.overhead.warmup
    ));
    out
}

/// One row of the calibration comparison, aggregated over seeds on the
/// target split.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub label: &'static str,
    pub dsc: GridCell,
    pub ece: GridCell,
    pub ace: GridCell,
    pub brier: GridCell,
}

/// Calibration-method comparison: the plain baseline, the same baseline
/// retrained with a focal term, the baseline post-processed by temperature
/// scaling, and the full objective.
#[derive(Debug)]
pub struct EvaluationTable {
    pub config_hash: String,
    pub rows: Vec<EvalRow>,
    /// Fitted temperature per seed, in `grid_seeds` order.
    pub temperatures: Vec<f64>,
    pub runs: Vec<RunRecord>,
}

pub const EVALUATION_HEADER: &str =
    "method,dsc_mean,dsc_std,ece_mean,ece_std,ace_mean,ace_std,brier_mean,brier_std";

/// Runs the calibration comparison over the seed grid and persists
/// `calibration_summary.csv` / `calibration_summary.txt` under `out_dir`.
///
/// Temperature scaling fits one scalar on the pooled source-eval logits of
/// the plain baseline, then rescales the target predictions. Because
/// dividing logits by a positive temperature never moves a logit across
/// zero, the thresholded masks are asserted bit-identical and the scaled
/// row reuses the baseline's geometry.
pub fn run_evaluation(
    cfg: &RootConfig,
    config_hash: &str,
    corpus_dir: &Path,
    entries: &[ManifestEntry],
    out_dir: &Path,
) -> Result<EvaluationTable> {
    cfg.validate()?;
    // Features depend only on the frozen encoder, so one prepared corpus
    // serves every seed and method.
    let store = ParamStore::init(&cfg.model, cfg.train.seed)?;
    let corpus = prepare_corpus(&cfg.model, &store, corpus_dir, entries, cfg.data.gaussian_sigma_mm)?;
    let (source_samples, target_samples) = (&corpus.source, &corpus.target);
    if source_samples.is_empty() || target_samples.is_empty() {
        return Err(Error::Data("calibration comparison needs both evaluation splits".to_string()));
    }

    let mut runs = Vec::new();
    let mut temperatures = Vec::new();
    // Per-seed target-split means for each method row.
    let mut by_row: [Vec<[f64; 4]>; 4] = Default::default();
    for &seed in &cfg.train.grid_seeds {
        let run_for = |ablation: Ablation, base: BaseLoss, tag: &str| -> Result<RunRecord> {
            let mut train = cfg.train.clone();
            train.ablation = ablation;
            train.seed = seed;
            train.weights.base = base;
            let run_dir = out_dir.join(format!("run-{tag}-seed{seed}"));
            std::fs::create_dir_all(&run_dir)
                .map_err(|e| Error::Data(format!("cannot create {}: {e}", run_dir.display())))?;
            run_experiment_prepared(
                &ExperimentSpec {
                    model: &cfg.model,
                    train: &train,
                    corpus_dir,
                    entries,
                    prompt_sigma_mm: cfg.data.gaussian_sigma_mm,
                    m_bins: cfg.metrics.bins,
                    run_dir: &run_dir,
                    config_hash,
                },
                &corpus,
            )
        };

        let base_run = run_for(Ablation::SamFt, BaseLoss::DiceBce, "sam-ft")?;
        let focal_run = run_for(Ablation::SamFt, BaseLoss::DiceFocal, "sam-ft-focal")?;
        let calsam_run = run_for(Ablation::Calsam, BaseLoss::DiceBce, "calsam")?;

        let summary_row = |r: &RunRecord| {
            let s = &r.target_summary;
            [s.dsc_mean, s.ece_mean, s.ace_mean, s.brier_mean]
        };
        by_row[0].push(summary_row(&base_run));
        by_row[1].push(summary_row(&focal_run));
        by_row[3].push(summary_row(&calsam_run));

        let trained = ParamStore::from_checkpoint(&formats::read_checkpoint(&base_run.checkpoint)?)?;
        let (ts_row, temperature) =
            temperature_scaled_row(cfg, &trained, source_samples, target_samples, &base_run)?;
        by_row[2].push(ts_row);
        temperatures.push(temperature);

        runs.extend([base_run, focal_run, calsam_run]);
    }

    let labels = ["SAM-FT", "SAM-FT+Focal", "SAM-FT+TS", "CalSAM"];
    let rows = labels
        .iter()
        .zip(&by_row)
        .map(|(label, per_seed)| {
            let col = |i: usize| cell(&per_seed.iter().map(|r| r[i]).collect::<Vec<_>>());
            EvalRow { label, dsc: col(0), ece: col(1), ace: col(2), brier: col(3) }
        })
        .collect();

    let table = EvaluationTable { config_hash: config_hash.to_string(), rows, temperatures, runs };
    formats::write_csv(&out_dir.join("calibration_summary.csv"), config_hash, EVALUATION_HEADER, &evaluation_csv_rows(&table))?;
    formats::write_atomic(&out_dir.join("calibration_summary.txt"), evaluation_text(&table).as_bytes())?;
    Ok(table)
}

/// Target-split means of the temperature-scaled baseline for one seed,
/// plus the fitted temperature. Asserts the geometry is untouched.
fn temperature_scaled_row(
    cfg: &RootConfig,
    trained: &ParamStore,
    source_samples: &[TrainSample],
    target_samples: &[TrainSample],
    base_run: &RunRecord,
) -> Result<([f64; 4], f64)> {
    let mut source_logits = Vec::new();
    let mut source_labels = Vec::new();
    for sample in source_samples {
        source_logits.extend(predict_logits(&cfg.model, trained, sample)?);
        source_labels.extend_from_slice(&sample.mask.data);
    }
    let fit = temperature_scale(&source_logits, &source_labels, cfg.metrics.bins)?;
    if fit.nll_calibrated > fit.nll_uncalibrated {
        return Err(Error::Data("temperature scaling increased the fitting-set likelihood loss".to_string()));
    }

    let mut dscs = Vec::new();
    let mut eces = Vec::new();
    let mut aces = Vec::new();
    let mut briers = Vec::new();
    for (sample, base_row) in target_samples.iter().zip(&base_run.target) {
        let logits = predict_logits(&cfg.model, trained, sample)?;
        let unscaled: Vec<f64> = logits.iter().map(|&l| logistic(l)).collect();
        let scaled: Vec<f64> = logits.iter().map(|&l| logistic(l / fit.temperature)).collect();
        let mask_unscaled = probs_to_mask(&unscaled, sample.mask.dims, sample.mask.spacing)?;
        let mask_scaled = probs_to_mask(&scaled, sample.mask.dims, sample.mask.spacing)?;
        if mask_scaled != mask_unscaled {
            return Err(Error::Data(format!("temperature scaling changed the thresholded mask of {}", sample.id)));
        }
        let report = calibration_report(&scaled, &sample.mask.data, cfg.metrics.bins)?;
        // Geometry is inherited from the baseline row of the same sample.
        if base_row.sample_id != sample.id {
            return Err(Error::Data("evaluation sample order diverged from the run record".to_string()));
        }
        dscs.push(base_row.dsc);
        eces.push(report.ece);
        aces.push(report.ace);
        briers.push(report.brier);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(([mean(&dscs), mean(&eces), mean(&aces), mean(&briers)], fit.temperature))
}

fn evaluation_csv_rows(table: &EvaluationTable) -> Vec<String> {
    table
        .rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{},{},{}",
                r.label, r.dsc.mean, r.dsc.std, r.ece.mean, r.ece.std, r.ace.mean, r.ace.std, r.brier.mean, r.brier.std
            )
        })
        .collect()
}

/// Aligned plain-text rendering of the calibration comparison.
pub fn evaluation_text(table: &EvaluationTable) -> String {
    let mut out = String::new();
    out.push_str(&format!("config_hash={}\n", table.config_hash));
    out.push_str("target-split calibration, mean \u{b1} std over seeds\n\n");
    out.push_str(&format!("{:<13} {:>17} {:>17} {:>17} {:>17}\n", "method", "dsc", "ece", "ace", "brier"));
    for r in &table.rows {
        out.push_str(&format!(
            "{:<13} {:>17} {:>17} {:>17} {:>17}\n",
            r.label,
            format!("{}", r.dsc),
            format!("{}", r.ece),
            format!("{}", r.ace),
            format!("{}", r.brier)
        ));
    }
    let temps: Vec<String> = table.temperatures.iter().map(|t| format!("{t:.4}")).collect();
    out.push_str(&format!("\nfitted temperatures per seed: {}\n", temps.join(", ")));
    out
}

/// Bound evaluation results with every input echoed.
#[derive(Debug, Clone)]
pub struct BoundsSummary {
    pub config_hash: String,
    /// Hash recorded inside the evaluated checkpoint.
    pub checkpoint_hash: String,
    pub inputs: BoundInputs,
    pub pac_bayes: f64,
    pub ece_bound: f64,
    /// How many target samples fed the Fisher-trace estimate.
    pub fisher_samples: usize,
}

/// Evaluates both bounds from a trained checkpoint and the corpus:
/// empirical error as the mean misclassified-voxel fraction over the
/// train split, feature Fisher trace and the overconfidence term from the
/// target split. Writes `bounds.txt` under `out_dir`.
pub fn run_bounds(
    cfg: &RootConfig,
    config_hash: &str,
    corpus_dir: &Path,
    entries: &[ManifestEntry],
    checkpoint: &Path,
    out_dir: &Path,
) -> Result<BoundsSummary> {
    cfg.validate()?;
    let ckpt = formats::read_checkpoint(checkpoint)?;
    let trained = ParamStore::from_checkpoint(&ckpt)?;
    let store = ParamStore::init(&cfg.model, cfg.train.seed)?;

    let corpus = prepare_corpus(&cfg.model, &store, corpus_dir, entries, cfg.data.gaussian_sigma_mm)?;
    let (train_samples, target_samples) = (&corpus.train, &corpus.target);
    if train_samples.is_empty() || target_samples.is_empty() {
        return Err(Error::Data("bound evaluation needs train and target-eval samples".to_string()));
    }

    let mut emp_error = 0.0;
    for sample in train_samples {
        let probs = predict_probs(&cfg.model, &trained, sample)?;
        let wrong = probs
            .iter()
            .zip(&sample.mask.data)
            .filter(|(&p, &t)| u8::from(p >= 0.5) != t)
            .count();
        emp_error += wrong as f64 / probs.len() as f64;
    }
    emp_error /= train_samples.len() as f64;

    let views: Vec<FeatureSample<'_>> = target_samples
        .iter()
        .map(|s| FeatureSample { z: &s.z, z_shape: s.z_shape, truth: &s.truth, truth_shape: s.truth_shape })
        .collect();
    let fisher_trace = estimate_fisher_trace(&cfg.model, &trained, &views, cfg.bounds.max_fisher_samples)?;
    let mut target_probs = Vec::new();
    for sample in target_samples {
        target_probs.extend(predict_probs(&cfg.model, &trained, sample)?);
    }
    let epsilon = estimate_epsilon(&target_probs)?;

    let inputs = BoundInputs {
        emp_error,
        fisher_trace,
        n: train_samples.len(),
        delta: cfg.bounds.delta,
        epsilon,
        c_constant: cfg.bounds.c_constant,
    };
    let summary = BoundsSummary {
        config_hash: config_hash.to_string(),
        checkpoint_hash: ckpt.config_hash.clone(),
        pac_bayes: pac_bayes_bound(&inputs)?,
        ece_bound: ece_bound(&inputs)?,
        fisher_samples: target_samples.len().min(cfg.bounds.max_fisher_samples),
        inputs,
    };
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", out_dir.display())))?;
    formats::write_atomic(&out_dir.join("bounds.txt"), bounds_text(&summary).as_bytes())?;
    Ok(summary)
}

/// Structured-text rendering of a bound evaluation.
pub fn bounds_text(s: &BoundsSummary) -> String {
    format!(
        "config_hash={}\ncheckpoint_hash={}\nemp_error={}\nfeature_fisher_trace={}\nn={}\ndelta={}\nepsilon={}\nc_constant={}\nfisher_samples={}\npac_bayes_bound={}\nece_bound={}\nnote=C={} is a reporting convention, not a derived constant; rescale the last term as needed\nnote=the information term is the feature-space Fisher trace, matching the trained penalty\n",
        s.config_hash,
        s.checkpoint_hash,
        s.inputs.emp_error,
        s.inputs.fisher_trace,
        s.inputs.n,
        s.inputs.delta,
        s.inputs.epsilon,
        s.inputs.c_constant,
        s.fisher_samples,
        s.pac_bayes,
        s.ece_bound,
        s.inputs.c_constant,
    )
}

/// Reassigns roles for one leave-one-center-out fold: the fold's train
/// ids become training samples, its source-eval ids (a subset of the
/// training samples, duplicated as evaluation-only views) the source
/// split, and the held-out center the target split.
pub fn entries_for_fold(
    entries: &[ManifestEntry],
    plan: &SplitPlan,
    fold_index: usize,
) -> Result<Vec<ManifestEntry>> {
    if plan.folds.is_empty() {
        return Err(Error::InvalidArgument("the split plan has no folds; fold selection needs the leave-one-center-out protocol".to_string()));
    }
    let fold = plan
        .folds
        .get(fold_index)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold_index} out of range, have {}", plan.folds.len())))?;
    let by_id: HashMap<&str, &ManifestEntry> = entries.iter().map(|e| (e.spec.id.as_str(), e)).collect();
    let mut out = Vec::with_capacity(fold.train.len() + fold.source_eval.len() + fold.test.len());
    let mut push = |ids: &[String], role: Role| -> Result<()> {
        for id in ids {
            let entry = by_id
                .get(id.as_str())
                .ok_or_else(|| Error::Data(format!("fold references unknown sample '{id}'")))?;
            let mut entry = (*entry).clone();
            entry.spec.role = role;
            out.push(entry);
        }
        Ok(())
    };
    push(&fold.train, Role::Train)?;
    push(&fold.source_eval, Role::SourceEval)?;
    push(&fold.test, Role::TargetEval)?;
    Ok(out)
}

/// Per-fold file names written by corpus generation under the
/// leave-one-center-out protocol.
pub const FOLD_HEADER: &str = "sample_id,role";

/// Writes one `fold_<k>.csv` per fold and returns the paths.
pub fn write_fold_files(dir: &Path, config_hash: &str, plan: &SplitPlan) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::with_capacity(plan.folds.len());
    for fold in &plan.folds {
        let mut rows = Vec::new();
        for id in &fold.train {
            rows.push(format!("{id},train"));
        }
        for id in &fold.source_eval {
            rows.push(format!("{id},source-eval"));
        }
        for id in &fold.test {
            rows.push(format!("{id},target-eval"));
        }
        let path = dir.join(format!("fold_{}.csv", fold.held_out_center));
        formats::write_csv(&path, config_hash, FOLD_HEADER, &rows)?;
        paths.push(path);
    }
    Ok(paths)
}
