//! End-to-end training runs on a small generated corpus: artifact layout,
//! determinism, and the persisted checkpoint round trip.

use calseg::formats;
use calseg::model::{ModelConfig, ParamStore};
use calseg::synthdata::{build_splits, write_corpus, DataConfig, Protocol};
use calseg::trainer::{
    run_experiment, ExperimentSpec, RunRecord, TrainConfig, LOSSES_HEADER, METRICS_HEADER, RELIABILITY_HEADER,
    TIMING_HEADER,
};

const HASH: &str = "deadbeef";

fn small_data() -> DataConfig {
    DataConfig {
        shape: [16, 16, 16],
        centers: 2,
        n_per_center: 2,
        protocol: Protocol::Scanner,
        seed: 500,
        ..DataConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig { guided: true, enc_channels: 4, dec_channels: 3, patch: 4, encoder_seed: 7177 }
}

fn small_train() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 2, lr0: 1e-3, ..TrainConfig::default() }
}

fn run_once(corpus: &std::path::Path, run_dir: &std::path::Path) -> RunRecord {
    let data = small_data();
    let (samples, _) = build_splits(data.n_per_center, data.centers, data.protocol, data.seed).unwrap();
    let entries = write_corpus(corpus, &data, HASH, &samples).unwrap();
    let model = small_model();
    let train = small_train();
    std::fs::create_dir_all(run_dir).unwrap();
    run_experiment(&ExperimentSpec {
        model: &model,
        train: &train,
        corpus_dir: corpus,
        entries: &entries,
        prompt_sigma_mm: data.gaussian_sigma_mm,
        m_bins: 15,
        run_dir,
        config_hash: HASH,
    })
    .unwrap()
}

#[test]
fn run_writes_every_artifact_with_pinned_headers() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    let run_dir = tmp.path().join("run");
    let record = run_once(&corpus, &run_dir);

    // Scanner protocol, 2 centers x 2 per center: 4 train, 2 source, 2 target.
    assert_eq!(record.epoch_losses.len(), 2);
    assert_eq!(record.step_seconds.len(), 4);
    assert_eq!(record.source.len(), 2);
    assert_eq!(record.target.len(), 2);
    assert_eq!(record.ablation.label(), "CalSAM");
    let gap = record.source_summary.dsc_mean - record.target_summary.dsc_mean;
    assert!((record.dgg_dsc - gap).abs() < 1e-15);

    for (file, header) in [
        ("losses.csv", LOSSES_HEADER),
        ("timing.csv", TIMING_HEADER),
        ("metrics.csv", METRICS_HEADER),
        ("reliability_source.csv", RELIABILITY_HEADER),
        ("reliability_target.csv", RELIABILITY_HEADER),
    ] {
        let text = std::fs::read_to_string(run_dir.join(file)).unwrap();
        assert!(text.starts_with(&format!("# config_hash={HASH}\n{header}\n")), "{file} header mismatch");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 2 + 4, "one row per evaluated sample");
    assert!(std::fs::read_to_string(run_dir.join("config.txt")).unwrap().contains("ablation=calsam"));
    let summary = std::fs::read_to_string(run_dir.join("summary.txt")).unwrap();
    assert!(summary.contains("dgg_dsc="));

    // Per-epoch loss means are finite and the learning rate column decays.
    let first = &record.epoch_losses[0];
    let last = &record.epoch_losses[1];
    assert!(first.parts.total.is_finite() && last.parts.total.is_finite());
    assert!(last.lr < first.lr);
}

#[test]
fn identical_configs_reproduce_the_run_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let record_a = run_once(&tmp.path().join("corpus-a"), &tmp.path().join("run-a"));
    let record_b = run_once(&tmp.path().join("corpus-b"), &tmp.path().join("run-b"));

    let losses = |r: &RunRecord| -> Vec<u64> {
        r.epoch_losses.iter().flat_map(|e| [e.parts.total.to_bits(), e.parts.fip.to_bits()]).collect()
    };
    assert_eq!(losses(&record_a), losses(&record_b));

    let ckpt_a = std::fs::read(&record_a.checkpoint).unwrap();
    let ckpt_b = std::fs::read(&record_b.checkpoint).unwrap();
    assert_eq!(ckpt_a, ckpt_b, "checkpoints must be byte-identical");

    let metrics = |r: &RunRecord| -> Vec<u64> {
        r.source.iter().chain(&r.target).flat_map(|m| [m.dsc.to_bits(), m.ece.to_bits()]).collect()
    };
    assert_eq!(metrics(&record_a), metrics(&record_b));
}

#[test]
fn checkpoint_round_trips_and_the_encoder_matches_a_fresh_init() {
    let tmp = tempfile::tempdir().unwrap();
    let record = run_once(&tmp.path().join("corpus"), &tmp.path().join("run"));

    let ckpt = formats::read_checkpoint(&record.checkpoint).unwrap();
    assert_eq!(ckpt.config_hash, HASH);
    let restored = ParamStore::from_checkpoint(&ckpt).unwrap();

    // Training must not have moved the encoder away from its seeded init.
    let fresh = ParamStore::init(&small_model(), small_train().seed).unwrap();
    assert_eq!(restored.encoder_blob(), fresh.encoder_blob());
    assert_ne!(
        restored.decoder().iter().flat_map(|p| p.data.clone()).collect::<Vec<_>>(),
        fresh.decoder().iter().flat_map(|p| p.data.clone()).collect::<Vec<_>>(),
        "decoder should have moved during training"
    );
}
