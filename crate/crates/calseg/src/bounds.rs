//! Numerical generalization and calibration bounds from measured
//! quantities.
//!
//! Two closed-form bounds are evaluated, never proved here:
//!
//! * generalization: `E_emp + sqrt((0.5 * I + ln(1/delta)) / (2n))`
//! * calibration:    `sqrt(I / n) + epsilon + C * ln(1/delta) / n`
//!
//! `I` is the feature Fisher information trace — the mean over samples of
//! the squared gradient norm of the per-sample log-likelihood with respect
//! to the encoder features. The log-likelihood of a sample is the sum of
//! per-voxel log-probabilities (voxels are conditionally independent), so
//! this trace scales with voxel count; the training penalty uses the
//! voxel-mean loss instead, which differs by the squared voxel count. The
//! two conventions are deliberate: the penalty stays comparable across
//! volume sizes, the bound follows the likelihood definition.
//!
//! The constant `C` has no principled default; 1.0 is used and every
//! report states the value so readers can rescale.

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::losses::ce_per_voxel_from_logits;
use crate::model::{decode, decoder_constants, ModelConfig, ParamStore};

/// Measured quantities the bounds are evaluated from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundInputs {
    /// Empirical error of the hypothesis.
    pub emp_error: f64,
    /// Feature Fisher information trace estimate.
    pub fisher_trace: f64,
    /// Number of samples behind the empirical error.
    pub n: usize,
    /// Failure probability, strictly inside (0, 1).
    pub delta: f64,
    /// Mean squared confidence margin of wrong-class probabilities.
    pub epsilon: f64,
    /// The calibration bound's universal constant. Convention, not a
    /// measured value.
    pub c_constant: f64,
}

impl Default for BoundInputs {
    fn default() -> Self {
        BoundInputs { emp_error: 0.0, fisher_trace: 0.0, n: 1, delta: 0.05, epsilon: 0.0, c_constant: 1.0 }
    }
}

impl BoundInputs {
    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::InvalidArgument("bound needs at least one sample".to_string()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("delta must lie in (0, 1), got {}", self.delta)));
        }
        if self.emp_error < 0.0 || self.fisher_trace < 0.0 || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument(
                "empirical error, fisher trace, and epsilon must be nonnegative".to_string(),
            ));
        }
        if self.c_constant <= 0.0 {
            return Err(Error::InvalidArgument(format!("c constant must be positive, got {}", self.c_constant)));
        }
        Ok(())
    }
}

/// Generalization bound: `E_emp + sqrt((0.5 * I + ln(1/delta)) / (2n))`.
pub fn pac_bayes_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let log_term = (1.0 / b.delta).ln();
    Ok(b.emp_error + ((0.5 * b.fisher_trace + log_term) / (2.0 * b.n as f64)).sqrt())
}

/// Calibration bound: `sqrt(I / n) + epsilon + C * ln(1/delta) / n`.
pub fn ece_bound(b: &BoundInputs) -> Result<f64> {
    b.validate()?;
    let log_term = (1.0 / b.delta).ln();
    Ok((b.fisher_trace / b.n as f64).sqrt() + b.epsilon + b.c_constant * log_term / b.n as f64)
}

/// One sample's cached encoder features and ground truth, borrowed from
/// wherever the caller keeps them. `truth` is the mask in its flat layout,
/// which reads as a `[nz, ny, nx]` tensor directly.
pub struct FeatureSample<'a> {
    pub z: &'a [f64],
    pub z_shape: [usize; 4],
    pub truth: &'a [f64],
    pub truth_shape: [usize; 3],
}

/// Estimates the feature Fisher information trace: for each sample, the
/// squared norm of the gradient of the summed voxel log-likelihood with
/// respect to the features, averaged over at most `max_samples` samples in
/// their given order.
pub fn estimate_fisher_trace(
    cfg: &ModelConfig,
    store: &ParamStore,
    samples: &[FeatureSample<'_>],
    max_samples: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("fisher trace estimate needs at least one sample".to_string()));
    }
    if max_samples == 0 {
        return Err(Error::InvalidArgument("fisher trace estimate needs max_samples >= 1".to_string()));
    }
    let take = samples.len().min(max_samples);
    let mut total = 0.0;
    for sample in &samples[..take] {
        let mut g = Graph::new();
        let z = g.leaf(sample.z.to_vec(), sample.z_shape.to_vec())?;
        let params = decoder_constants(store)?;
        let logits = decode(&mut g, cfg, &z, &params)?;
        let truth = crate::autodiff::Tensor::new(sample.truth.to_vec(), sample.truth_shape.to_vec())?;
        let ce = ce_per_voxel_from_logits(&mut g, &logits, &truth)?;
        let nll = g.sum(&ce)?;
        let grad = g.backward(&nll, &[&z], false)?.remove(0);
        total += grad.data().iter().map(|v| v * v).sum::<f64>();
    }
    Ok(total / take as f64)
}

/// Estimates the calibration bound's `epsilon` from predicted foreground
/// probabilities: the mean over voxels of the squared gap between the
/// losing and winning class probability, `(1 - 2 * max(p, 1-p))^2`.
pub fn estimate_epsilon(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("epsilon estimate needs at least one voxel".to_string()));
    }
    let n = probs.len() as f64;
    Ok(probs
        .iter()
        .map(|&p| {
            let conf = p.max(1.0 - p);
            (1.0 - 2.0 * conf).powi(2)
        })
        .sum::<f64>()
        / n)
}
