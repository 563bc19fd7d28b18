//! Root configuration: one serializable tree covering data generation,
//! model, training, metrics, and bound evaluation, hashed so every
//! artifact can name the exact configuration that produced it.
//!
//! The hash is SHA-256 over the canonical JSON form (object keys sorted,
//! compact separators), so semantically identical configurations hash
//! identically regardless of field order in the source file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::BoundInputs;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DataConfig;
use crate::trainer::TrainConfig;

/// Supported 95th-percentile surface-distance convention. Exactly one
/// exists; the field makes the convention explicit in every snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Hd95Convention {
    /// Both directed surface-distance sets pooled, then one linearly
    /// interpolated percentile.
    #[default]
    PooledLinear,
}

/// Calibration-metric settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// Bin count shared by the equal-width and equal-mass estimators.
    pub bins: usize,
    pub hd95: Hd95Convention,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { bins: 15, hd95: Hd95Convention::PooledLinear }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bins == 0 {
            return Err(Error::Config("metrics.bins must be positive".to_string()));
        }
        Ok(())
    }
}

/// Bound-evaluation settings. Sample counts and empirical terms come from
/// the evaluated run, not from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsConfig {
    /// Confidence parameter delta of both bounds.
    pub delta: f64,
    /// Smoothness constant of the calibration bound; no tighter value is
    /// derived, so it is always reported next to the result.
    pub c_constant: f64,
    /// Ceiling on feature samples used by the Fisher-trace estimator.
    pub max_fisher_samples: usize,
}

impl Default for BoundsConfig {
    fn default() -> Self {
        let b = BoundInputs::default();
        BoundsConfig { delta: b.delta, c_constant: b.c_constant, max_fisher_samples: 64 }
    }
}

impl BoundsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!("bounds.delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.c_constant <= 0.0 || !self.c_constant.is_finite() {
            return Err(Error::Config(format!("bounds.c_constant must be positive, got {}", self.c_constant)));
        }
        if self.max_fisher_samples == 0 {
            return Err(Error::Config("bounds.max_fisher_samples must be positive".to_string()));
        }
        Ok(())
    }
}

/// The whole configuration tree. Defaults describe the desk-scale setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RootConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub metrics: MetricsConfig,
    pub bounds: BoundsConfig,
    pub output_dir: PathBuf,
}

impl Default for RootConfig {
    fn default() -> Self {
        RootConfig {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            metrics: MetricsConfig::default(),
            bounds: BoundsConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl RootConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.metrics.validate()?;
        self.bounds.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output_dir must not be empty".to_string()));
        }
        Ok(())
    }

    /// Loads and validates a JSON configuration file. Unknown fields are
    /// rejected at every level.
    pub fn load(path: &Path) -> Result<RootConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RootConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Canonical JSON: compact, object keys sorted. `serde_json`'s map type
/// keeps keys in sorted order, making `to_string` canonical already; this
/// round-trips through `Value` so the property holds even if a caller
/// constructed the config from differently-ordered sources.
pub fn canonical_json(cfg: &RootConfig) -> Result<String> {
    let value = serde_json::to_value(cfg).map_err(|e| Error::Config(e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| Error::Config(e.to_string()))
}

/// Hex SHA-256 of the canonical JSON form.
pub fn config_hash(cfg: &RootConfig) -> Result<String> {
    let canon = canonical_json(cfg)?;
    Ok(hex::encode(Sha256::digest(canon.as_bytes())))
}

/// Applies `key.path=value` overrides in order, then re-validates. Values
/// parse as JSON when possible (numbers, booleans, arrays) and fall back
/// to plain strings, so `train.ablation=sam-ft` works unquoted. Paths must
/// name existing fields; overrides never create new keys.
pub fn apply_overrides(cfg: &mut RootConfig, overrides: &[String]) -> Result<()> {
    if overrides.is_empty() {
        return Ok(());
    }
    let mut value = serde_json::to_value(&*cfg).map_err(|e| Error::Config(e.to_string()))?;
    for entry in overrides {
        let (path, raw) = entry
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override '{entry}' is not of the form key.path=value")))?;
        if path.is_empty() {
            return Err(Error::Config(format!("override '{entry}' has an empty path")));
        }
        let leaf: serde_json::Value =
            serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let mut node = &mut value;
        let segments: Vec<&str> = path.split('.').collect();
        for (i, segment) in segments.iter().enumerate() {
            let map = node
                .as_object_mut()
                .ok_or_else(|| Error::Config(format!("'{}' is not a configuration section", segments[..i].join("."))))?;
            if i + 1 == segments.len() {
                let slot = map
                    .get_mut(*segment)
                    .ok_or_else(|| Error::Config(format!("unknown configuration key '{path}'")))?;
                *slot = leaf;
                break;
            }
            node = map
                .get_mut(*segment)
                .ok_or_else(|| Error::Config(format!("unknown configuration section '{}'", segments[..=i].join("."))))?;
        }
    }
    let updated: RootConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("override produced an invalid config: {e}")))?;
    updated.validate()?;
    *cfg = updated;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Ablation;

    #[test]
    fn default_config_validates_and_hashes_stably() {
        let cfg = RootConfig::default();
        cfg.validate().unwrap();
        let h1 = config_hash(&cfg).unwrap();
        let h2 = config_hash(&cfg).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 64);
        assert!(h1.chars().all(|c| c.is_ascii_hexdigit()));
    }

    #[test]
    fn any_field_change_changes_the_hash() {
        let base = RootConfig::default();
        let h0 = config_hash(&base).unwrap();
        let mut c = base.clone();
        c.train.lr0 = 2e-4;
        assert_ne!(config_hash(&c).unwrap(), h0);
        let mut c = base.clone();
        c.data.seed += 1;
        assert_ne!(config_hash(&c).unwrap(), h0);
        let mut c = base;
        c.metrics.bins = 10;
        assert_ne!(config_hash(&c).unwrap(), h0);
    }

    #[test]
    fn overrides_reach_nested_fields_of_every_kind() {
        let mut cfg = RootConfig::default();
        apply_overrides(
            &mut cfg,
            &[
                "train.lr0=0.05".to_string(),
                "train.ablation=sam-ft".to_string(),
                "train.grid_seeds=[1,2]".to_string(),
                "train.weights.lambda_fip=0.7".to_string(),
                "data.shape=[16,16,16]".to_string(),
                "model.guided=false".to_string(),
                "output_dir=elsewhere".to_string(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr0, 0.05);
        assert_eq!(cfg.train.ablation, Ablation::SamFt);
        assert_eq!(cfg.train.grid_seeds, vec![1, 2]);
        assert_eq!(cfg.train.weights.lambda_fip, 0.7);
        assert_eq!(cfg.data.shape, [16, 16, 16]);
        assert!(!cfg.model.guided);
        assert_eq!(cfg.output_dir, PathBuf::from("elsewhere"));
    }

    #[test]
    fn overrides_reject_unknown_keys_and_bad_values() {
        let mut cfg = RootConfig::default();
        assert!(apply_overrides(&mut cfg, &["train.lr=0.05".to_string()]).is_err());
        assert!(apply_overrides(&mut cfg, &["nope.lr0=0.05".to_string()]).is_err());
        assert!(apply_overrides(&mut cfg, &["train.lr0".to_string()]).is_err());
        assert!(apply_overrides(&mut cfg, &["train.lr0=-1".to_string()]).is_err());
        assert!(apply_overrides(&mut cfg, &["train.epochs=two".to_string()]).is_err());
        // A failed batch must leave the config untouched.
        assert_eq!(cfg, RootConfig::default());
    }

    #[test]
    fn hash_ignores_source_key_order() {
        let cfg = RootConfig::default();
        let scrambled = format!(
            "{{\"train\": {}, \"data\": {}}}",
            serde_json::to_string(&cfg.train).unwrap(),
            serde_json::to_string(&cfg.data).unwrap(),
        );
        let parsed: RootConfig = serde_json::from_str(&scrambled).unwrap();
        assert_eq!(config_hash(&parsed).unwrap(), config_hash(&cfg).unwrap());
    }

    #[test]
    fn load_round_trips_through_a_file() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("config.json");
        let cfg = RootConfig::default();
        std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
        let loaded = RootConfig::load(&path).unwrap();
        assert_eq!(loaded, cfg);

        std::fs::write(&path, "{\"train\": {\"mystery\": 1}}").unwrap();
        assert!(RootConfig::load(&path).is_err());
    }
}
