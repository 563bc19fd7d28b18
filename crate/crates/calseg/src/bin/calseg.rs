//! Batch command-line interface: corpus generation, training, the
//! ablation and calibration grids, bound evaluation, and artifact
//! verification. Every run is driven by one JSON configuration (plus
//! dotted-path overrides) whose hash is embedded in each produced file;
//! no other source of randomness or settings exists.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use calseg::config::{apply_overrides, canonical_json, config_hash, RootConfig};
use calseg::error::{Error, Result};
use calseg::formats;
use calseg::harness::{
    ablation_text, bounds_text, entries_for_fold, evaluation_text, run_ablation_grid, run_bounds, run_evaluation,
    write_fold_files,
};
use calseg::synthdata::{build_splits, read_manifest, write_corpus, ManifestEntry, Protocol, Vendor};
use calseg::trainer::{run_experiment, ExperimentSpec};

#[derive(Parser)]
#[command(name = "calseg", version, about = "Calibrated volumetric segmentation workbench")]
struct Cli {
    /// JSON configuration file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one configuration field, e.g. --set train.lr0=0.001.
    /// Repeatable; applied in order after the file is loaded.
    #[arg(long = "set", global = true, value_name = "KEY.PATH=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus, manifest, and fold files.
    Generate,
    /// Train one run under the configured ablation and seed.
    Train {
        /// Leave-one-center-out fold index; requires the loco protocol.
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Run the four-method ablation grid over all configured seeds.
    Ablate {
        #[arg(long)]
        fold: Option<usize>,
        /// Timed steps for the step-overhead measurement.
        #[arg(long, default_value_t = 100)]
        overhead_steps: usize,
        /// Untimed steps before the measurement starts.
        #[arg(long, default_value_t = 10)]
        overhead_warmup: usize,
    },
    /// Compare calibration methods over all configured seeds.
    Evaluate {
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Evaluate both generalization bounds from a trained checkpoint.
    Bounds {
        /// Checkpoint to evaluate; defaults to the train command's output
        /// path for the current configuration.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fold: Option<usize>,
    },
    /// Re-hash the configuration and confirm every artifact under the
    /// output directory embeds that hash.
    Verify {
        /// Directory to verify instead of the configured output directory.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RootConfig::load(path)?,
        None => RootConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.set)?;
    cfg.validate()?;
    let hash = config_hash(&cfg)?;

    match cli.command {
        Command::Generate => cmd_generate(&cfg, &hash),
        Command::Train { fold } => cmd_train(&cfg, &hash, fold),
        Command::Ablate { fold, overhead_steps, overhead_warmup } => {
            cmd_ablate(&cfg, &hash, fold, overhead_steps, overhead_warmup)
        }
        Command::Evaluate { fold } => cmd_evaluate(&cfg, &hash, fold),
        Command::Bounds { checkpoint, fold } => cmd_bounds(&cfg, &hash, checkpoint, fold),
        Command::Verify { dir } => cmd_verify(&cfg, &hash, dir),
    }
}

fn corpus_dir(cfg: &RootConfig) -> PathBuf {
    cfg.output_dir.join("corpus")
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::Data(format!("cannot create {}: {e}", path.display())))
}

/// Writes `config.json`: the canonical configuration plus its hash, so
/// the snapshot verifies like every other artifact.
fn write_config_snapshot(dir: &Path, cfg: &RootConfig, hash: &str) -> Result<()> {
    let body = format!("{{\"config_hash\":\"{hash}\",\"config\":{}}}\n", canonical_json(cfg)?);
    formats::write_atomic(&dir.join("config.json"), body.as_bytes())
}

fn cmd_generate(cfg: &RootConfig, hash: &str) -> Result<()> {
    let dir = corpus_dir(cfg);
    create_dir(&dir)?;
    let (samples, plan) = build_splits(cfg.data.n_per_center, cfg.data.centers, cfg.data.protocol, cfg.data.seed)?;
    let entries = write_corpus(&dir, &cfg.data, hash, &samples)?;
    write_config_snapshot(&dir, cfg, hash)?;
    let folds = if cfg.data.protocol == Protocol::Loco { write_fold_files(&dir, hash, &plan)?.len() } else { 0 };

    let count = |v: Vendor| entries.iter().filter(|e| e.spec.vendor == v).count();
    println!("config_hash={hash}");
    println!("corpus={}", dir.display());
    println!("samples={} vendor_a={} vendor_b={}", entries.len(), count(Vendor::A), count(Vendor::B));
    println!(
        "train={} source_eval={} target_eval={} folds={folds}",
        plan.train.len(),
        plan.source_eval.len(),
        plan.target_eval.len()
    );
    Ok(())
}

/// Loads the manifest and, for fold runs, reassigns roles from the
/// deterministically rebuilt split plan.
fn load_entries(cfg: &RootConfig, fold: Option<usize>) -> Result<Vec<ManifestEntry>> {
    let dir = corpus_dir(cfg);
    let entries = read_manifest(&dir)?;
    match fold {
        None => Ok(entries),
        Some(k) => {
            let (_, plan) = build_splits(cfg.data.n_per_center, cfg.data.centers, cfg.data.protocol, cfg.data.seed)?;
            entries_for_fold(&entries, &plan, k)
        }
    }
}

fn fold_suffix(fold: Option<usize>) -> String {
    fold.map(|k| format!("-fold{k}")).unwrap_or_default()
}

fn train_run_dir(cfg: &RootConfig, fold: Option<usize>) -> PathBuf {
    cfg.output_dir.join("train").join(format!(
        "run-{}-seed{}{}",
        cfg.train.ablation.slug(),
        cfg.train.seed,
        fold_suffix(fold)
    ))
}

fn cmd_train(cfg: &RootConfig, hash: &str, fold: Option<usize>) -> Result<()> {
    let entries = load_entries(cfg, fold)?;
    let run_dir = train_run_dir(cfg, fold);
    create_dir(&run_dir)?;
    write_config_snapshot(&run_dir, cfg, hash)?;
    let record = run_experiment(&ExperimentSpec {
        model: &cfg.model,
        train: &cfg.train,
        corpus_dir: &corpus_dir(cfg),
        entries: &entries,
        prompt_sigma_mm: cfg.data.gaussian_sigma_mm,
        m_bins: cfg.metrics.bins,
        run_dir: &run_dir,
        config_hash: hash,
    })?;
    print!("{}", std::fs::read_to_string(record.run_dir.join("summary.txt")).map_err(|e| Error::Data(e.to_string()))?);
    Ok(())
}

fn cmd_ablate(cfg: &RootConfig, hash: &str, fold: Option<usize>, steps: usize, warmup: usize) -> Result<()> {
    let entries = load_entries(cfg, fold)?;
    let out = cfg.output_dir.join(format!("ablate{}", fold_suffix(fold)));
    create_dir(&out)?;
    write_config_snapshot(&out, cfg, hash)?;
    let grid = run_ablation_grid(cfg, hash, &corpus_dir(cfg), &entries, &out, steps, warmup)?;
    print!("{}", ablation_text(&grid));
    Ok(())
}

fn cmd_evaluate(cfg: &RootConfig, hash: &str, fold: Option<usize>) -> Result<()> {
    let entries = load_entries(cfg, fold)?;
    let out = cfg.output_dir.join(format!("evaluate{}", fold_suffix(fold)));
    create_dir(&out)?;
    write_config_snapshot(&out, cfg, hash)?;
    let table = run_evaluation(cfg, hash, &corpus_dir(cfg), &entries, &out)?;
    print!("{}", evaluation_text(&table));
    Ok(())
}

fn cmd_bounds(cfg: &RootConfig, hash: &str, checkpoint: Option<PathBuf>, fold: Option<usize>) -> Result<()> {
    let entries = load_entries(cfg, fold)?;
    let checkpoint = checkpoint.unwrap_or_else(|| train_run_dir(cfg, fold).join("checkpoint.cspt"));
    if !checkpoint.is_file() {
        return Err(Error::Data(format!(
            "checkpoint {} not found; train first or pass --checkpoint",
            checkpoint.display()
        )));
    }
    let out = cfg.output_dir.join(format!("bounds{}", fold_suffix(fold)));
    let summary = run_bounds(cfg, hash, &corpus_dir(cfg), &entries, &checkpoint, &out)?;
    write_config_snapshot(&out, cfg, hash)?;
    print!("{}", bounds_text(&summary));
    Ok(())
}

/// Walks `dir`, extracts the embedded hash from every artifact that
/// carries one, and compares against the current configuration's hash.
/// Prints one line per checked file. Any mismatch or unreadable artifact
/// is a named failure.
fn cmd_verify(cfg: &RootConfig, hash: &str, dir: Option<PathBuf>) -> Result<()> {
    let root = dir.unwrap_or_else(|| cfg.output_dir.clone());
    if !root.is_dir() {
        return Err(Error::Data(format!("{} is not a directory", root.display())));
    }
    let mut files = Vec::new();
    collect_files(&root, &mut files)?;
    files.sort();

    let mut checked = 0usize;
    let mut failures = Vec::new();
    for path in &files {
        let embedded = match embedded_hash(path)? {
            Some(h) => h,
            None => continue,
        };
        checked += 1;
        if embedded == hash {
            println!("ok      {}", path.display());
        } else {
            println!("MISMATCH {} (embeds {})", path.display(), embedded);
            failures.push(path.display().to_string());
        }
    }
    if checked == 0 {
        return Err(Error::Data(format!("no hash-carrying artifacts found under {}", root.display())));
    }
    println!("checked={checked} mismatched={}", failures.len());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} artifact(s) embed a different config hash: {}", failures.len(), failures.join(", "))))
    }
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::Data(e.to_string()))?;
        let path = entry.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// The hash a file claims to have been produced under, or `None` for file
/// kinds that do not carry one (raw volumes and masks are covered by
/// their manifest).
fn embedded_hash(path: &Path) -> Result<Option<String>> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
    match ext {
        "csv" => {
            let text = read_text(path)?;
            let first = text.lines().next().unwrap_or_default();
            match first.strip_prefix("# config_hash=") {
                Some(h) => Ok(Some(h.to_string())),
                None => Err(Error::Data(format!("{} lacks the config-hash comment", path.display()))),
            }
        }
        "cspt" => Ok(Some(formats::read_checkpoint(path)?.config_hash)),
        "txt" => {
            let text = read_text(path)?;
            Ok(text
                .lines()
                .find_map(|line| line.strip_prefix("config_hash=").map(|h| h.to_string())))
        }
        "json" if name == "config.json" => {
            let text = read_text(path)?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            let claimed = value
                .get("config_hash")
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::Data(format!("{} lacks a config_hash field", path.display())))?;
            let snapshot: RootConfig = serde_json::from_value(
                value.get("config").cloned().ok_or_else(|| Error::Data(format!("{} lacks a config field", path.display())))?,
            )
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
            // The snapshot must also be internally consistent.
            if config_hash(&snapshot)? != claimed {
                return Err(Error::Data(format!("{} snapshot does not hash to its claimed value", path.display())));
            }
            Ok(Some(claimed.to_string()))
        }
        _ => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}
