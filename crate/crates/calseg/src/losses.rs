//! Segmentation losses and the two feature-space regularizers.
//!
//! The base objective is soft Dice plus binary cross-entropy on the
//! predicted probabilities. On top of that sit two penalties:
//!
//! * The Fisher information penalty measures the sensitivity of the
//!   per-sample loss to the (frozen, detached) encoder features:
//!   `0.5 * ||d loss / d z||^2`. It equals half the trace of the empirical
//!   outer-product Fisher information of the features, computed without ever
//!   materializing that matrix. The gradient is recorded with
//!   `create_graph`, so the penalty itself is differentiable with respect to
//!   the decoder parameters.
//! * The confidence misalignment penalty passes each voxel's cross-entropy
//!   through a shifted logistic, `sigmoid((ce - tau) / gamma)`, and
//!   averages. Voxels whose loss exceeds `tau` (confidently wrong ones)
//!   push the penalty toward 1; comfortable voxels contribute nearly 0.
//!
//! All reductions are arithmetic means over voxels unless a sum is
//! requested, so values are comparable across volume sizes.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};

/// Additive smoothing for the soft Dice ratio.
pub const DICE_EPSILON: f64 = 1e-6;
/// Probability clamp for the log terms of cross-entropy losses.
pub const PROB_EPSILON: f64 = 1e-12;

/// Inner loss differentiated by the Fisher information penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FipInner {
    CrossEntropy,
    Dice,
}

/// Reduction applied over voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Reduction {
    Mean,
    Sum,
}

/// Cross-entropy-style term paired with Dice in the base objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaseLoss {
    DiceBce,
    DiceFocal,
}

/// Weights and shape parameters of the combined objective.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the Fisher information penalty. Zero skips the penalty
    /// entirely, including its extra backward pass.
    pub lambda_fip: f64,
    /// Weight of the confidence misalignment penalty.
    pub lambda_cmp: f64,
    /// Cross-entropy threshold of the misalignment penalty. The default is
    /// ln 2, the loss of a maximally uncertain prediction, so the penalty
    /// activates exactly when a voxel is worse than uninformed.
    pub tau: f64,
    /// Sharpness of the misalignment penalty's logistic gate.
    pub gamma: f64,
    /// Which inner loss the Fisher penalty differentiates.
    pub fip_inner: FipInner,
    /// Reduction for the binary cross-entropy term.
    pub bce_reduction: Reduction,
    /// Base objective variant: Dice plus BCE, or Dice plus focal.
    pub base: BaseLoss,
    /// Focusing exponent when the base uses the focal term.
    pub focal_focus: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_fip: 0.3,
            lambda_cmp: 0.5,
            tau: std::f64::consts::LN_2,
            gamma: 0.1,
            fip_inner: FipInner::CrossEntropy,
            bce_reduction: Reduction::Mean,
            base: BaseLoss::DiceBce,
            focal_focus: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.gamma <= 0.0 {
            return Err(Error::InvalidArgument(format!("cmp gamma must be positive, got {}", self.gamma)));
        }
        if self.lambda_fip < 0.0 || self.lambda_cmp < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be non-negative".to_string()));
        }
        if self.focal_focus < 0.0 {
            return Err(Error::InvalidArgument(format!("focal focus must be non-negative, got {}", self.focal_focus)));
        }
        Ok(())
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("prediction shape {:?} does not match truth shape {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

/// Soft Dice loss: `1 - (2 sum(p m) + eps) / (sum(p) + sum(m) + eps)`.
/// A perfect hard prediction scores exactly 0; the smoothing keeps the
/// ratio defined when both prediction and truth are empty.
pub fn dice_loss(g: &mut Graph, probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    check_same_shape("dice_loss", probs, truth)?;
    let inter = g.mul(probs, truth)?;
    let inter_sum = g.sum(&inter)?;
    let num = g.affine(&inter_sum, 2.0, DICE_EPSILON)?;
    let p_sum = g.sum(probs)?;
    let m_sum = g.sum(truth)?;
    let den_raw = g.add(&p_sum, &m_sum)?;
    let den = g.add_scalar(&den_raw, DICE_EPSILON)?;
    let ratio = g.div(&num, &den)?;
    g.affine(&ratio, -1.0, 1.0)
}

/// Binary cross-entropy on probabilities, mean-reduced over voxels.
pub fn bce_loss(g: &mut Graph, probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    bce_loss_with(g, probs, truth, Reduction::Mean)
}

/// Binary cross-entropy with an explicit reduction. Probabilities are
/// clamped to `[PROB_EPSILON, 1 - PROB_EPSILON]` so the logs stay finite at
/// hard 0/1 predictions.
pub fn bce_loss_with(g: &mut Graph, probs: &Tensor, truth: &Tensor, reduction: Reduction) -> Result<Tensor> {
    check_same_shape("bce_loss", probs, truth)?;
    let p = g.clamp(probs, PROB_EPSILON, 1.0 - PROB_EPSILON)?;
    let log_p = g.log(&p)?;
    let one_minus_p = g.affine(&p, -1.0, 1.0)?;
    let log_q = g.log(&one_minus_p)?;
    let one_minus_m = g.affine(truth, -1.0, 1.0)?;
    let pos = g.mul(truth, &log_p)?;
    let neg_term = g.mul(&one_minus_m, &log_q)?;
    let ll = g.add(&pos, &neg_term)?;
    let nll = g.neg(&ll)?;
    match reduction {
        Reduction::Mean => g.mean(&nll),
        Reduction::Sum => g.sum(&nll),
    }
}

/// Base segmentation objective: Dice plus BCE.
pub fn sam_loss(g: &mut Graph, probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    let d = dice_loss(g, probs, truth)?;
    let b = bce_loss(g, probs, truth)?;
    g.add(&d, &b)
}

/// Per-voxel cross-entropy straight from logits, in the overflow-free
/// softplus form: `m * softplus(-s) + (1 - m) * softplus(s)`.
pub fn ce_per_voxel_from_logits(g: &mut Graph, logits: &Tensor, truth: &Tensor) -> Result<Tensor> {
    check_same_shape("ce_per_voxel", logits, truth)?;
    let neg_logits = g.neg(logits)?;
    let sp_pos = g.softplus(&neg_logits)?;
    let sp_neg = g.softplus(logits)?;
    let one_minus_m = g.affine(truth, -1.0, 1.0)?;
    let pos = g.mul(truth, &sp_pos)?;
    let neg = g.mul(&one_minus_m, &sp_neg)?;
    g.add(&pos, &neg)
}

/// Confidence misalignment penalty: mean over voxels of
/// `sigmoid((ce - tau) / gamma)`. Sits in `(0, 1)`, crosses 0.5 exactly
/// where a voxel's cross-entropy equals `tau`, and saturates a few `gamma`
/// away from the threshold.
pub fn cmp_penalty(g: &mut Graph, logits: &Tensor, truth: &Tensor, tau: f64, gamma: f64) -> Result<Tensor> {
    if gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!("cmp gamma must be positive, got {gamma}")));
    }
    let ce = ce_per_voxel_from_logits(g, logits, truth)?;
    // Subtract before dividing: a voxel loss exactly at the threshold must
    // gate to exactly one half, which folding tau/gamma into one affine
    // step would miss by an ulp.
    let centered = g.affine(&ce, 1.0, -tau)?;
    let gated = g.affine(&centered, 1.0 / gamma, 0.0)?;
    let sig = g.sigmoid(&gated)?;
    g.mean(&sig)
}

/// Fisher information penalty for one sample: `0.5 * ||d inner / d z||^2`
/// where `z` is the detached feature leaf and `inner` is the chosen
/// voxel-mean inner loss recomputed from `logits`. The feature gradient is
/// recorded (`create_graph`), so the returned scalar is differentiable with
/// respect to everything downstream of `z`, in particular the decoder
/// parameters.
pub fn fip_penalty(g: &mut Graph, z: &Tensor, logits: &Tensor, truth: &Tensor, inner: FipInner) -> Result<Tensor> {
    if !g.is_leaf(z) {
        return Err(Error::NotALeaf);
    }
    let inner_loss = match inner {
        FipInner::CrossEntropy => {
            let ce = ce_per_voxel_from_logits(g, logits, truth)?;
            g.mean(&ce)?
        }
        FipInner::Dice => {
            let probs = g.sigmoid(logits)?;
            dice_loss(g, &probs, truth)?
        }
    };
    let grads = g.backward(&inner_loss, &[z], true)?;
    let sq = g.norm_sq(&grads[0])?;
    g.scale(&sq, 0.5)
}

/// Focal loss with focusing exponent `focus`: easy voxels are downweighted
/// by `(1 - p_t)^focus`. At `focus = 0` this is exactly the mean BCE.
pub fn focal_loss(g: &mut Graph, probs: &Tensor, truth: &Tensor, focus: f64) -> Result<Tensor> {
    check_same_shape("focal_loss", probs, truth)?;
    if focus < 0.0 {
        return Err(Error::InvalidArgument(format!("focal focus must be non-negative, got {focus}")));
    }
    // p_t: probability assigned to the true class of each voxel.
    let one_minus_m = g.affine(truth, -1.0, 1.0)?;
    let one_minus_p = g.affine(probs, -1.0, 1.0)?;
    let hit = g.mul(probs, truth)?;
    let miss = g.mul(&one_minus_p, &one_minus_m)?;
    let p_t = g.add(&hit, &miss)?;
    let p_t = g.clamp(&p_t, PROB_EPSILON, 1.0 - PROB_EPSILON)?;
    let log_pt = g.log(&p_t)?;
    let damp = g.affine(&p_t, -1.0, 1.0)?;
    let weight = g.powf(&damp, focus)?;
    let weighted = g.mul(&weight, &log_pt)?;
    let neg = g.neg(&weighted)?;
    g.mean(&neg)
}

/// Per-sample inputs of the combined objective. `logits` must be computed
/// from `z` on the same graph; `z` must be a leaf.
pub struct CombinedInputs<'a> {
    pub z: &'a Tensor,
    pub logits: &'a Tensor,
    pub truth: &'a Tensor,
}

/// Scalar values of each component for logging, in addition to the
/// differentiable total. `ce` holds whichever cross-entropy-style term the
/// base objective uses (BCE or focal).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub dice: f64,
    pub ce: f64,
    pub sam: f64,
    pub fip: f64,
    pub cmp: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Name of the first non-finite component, if any.
    pub fn non_finite_component(&self) -> Option<&'static str> {
        [
            ("dice", self.dice),
            ("ce", self.ce),
            ("sam", self.sam),
            ("fip", self.fip),
            ("cmp", self.cmp),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(name, _)| name)
    }

    /// Elementwise mean of several breakdowns.
    pub fn mean_of(parts: &[LossBreakdown]) -> LossBreakdown {
        let n = parts.len().max(1) as f64;
        let mut out = LossBreakdown::default();
        for p in parts {
            out.dice += p.dice;
            out.ce += p.ce;
            out.sam += p.sam;
            out.fip += p.fip;
            out.cmp += p.cmp;
            out.total += p.total;
        }
        out.dice /= n;
        out.ce /= n;
        out.sam /= n;
        out.fip /= n;
        out.cmp /= n;
        out.total /= n;
        out
    }
}

/// Combined training objective for one sample:
/// `sam + lambda_fip * fip + lambda_cmp * cmp`. Penalties with zero weight
/// are skipped, not multiplied by zero, so a disabled Fisher penalty costs
/// no extra backward pass and the remaining graph is identical to the
/// corresponding ablation's.
pub fn combined_loss(g: &mut Graph, inputs: &CombinedInputs<'_>, w: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    w.validate()?;
    let probs = g.sigmoid(inputs.logits)?;
    let dice = dice_loss(g, &probs, inputs.truth)?;
    let ce = match w.base {
        BaseLoss::DiceBce => bce_loss_with(g, &probs, inputs.truth, w.bce_reduction)?,
        BaseLoss::DiceFocal => focal_loss(g, &probs, inputs.truth, w.focal_focus)?,
    };
    let sam = g.add(&dice, &ce)?;
    let mut breakdown = LossBreakdown {
        dice: dice.item()?,
        ce: ce.item()?,
        sam: sam.item()?,
        ..LossBreakdown::default()
    };
    let mut total = sam;
    if w.lambda_fip > 0.0 {
        let fip = fip_penalty(g, inputs.z, inputs.logits, inputs.truth, w.fip_inner)?;
        breakdown.fip = fip.item()?;
        let weighted = g.scale(&fip, w.lambda_fip)?;
        total = g.add(&total, &weighted)?;
    }
    if w.lambda_cmp > 0.0 {
        let cmp = cmp_penalty(g, inputs.logits, inputs.truth, w.tau, w.gamma)?;
        breakdown.cmp = cmp.item()?;
        let weighted = g.scale(&cmp, w.lambda_cmp)?;
        total = g.add(&total, &weighted)?;
    }
    breakdown.total = total.item()?;
    Ok((total, breakdown))
}

/// Brute-force trace of the empirical outer-product Fisher information:
/// builds the full `d x d` matrix `(1/N) sum_i g_i g_i^T` and sums its
/// diagonal. Quadratic in feature count; exists purely as an independent
/// reference for the penalty's identity.
pub fn fisher_trace_oracle(grads: &[Vec<f64>]) -> Result<f64> {
    let n = grads.len();
    if n == 0 {
        return Err(Error::InvalidArgument("fisher trace oracle needs at least one gradient".to_string()));
    }
    let d = grads[0].len();
    if grads.iter().any(|gr| gr.len() != d) {
        return Err(Error::InvalidArgument("fisher trace oracle gradients must share one length".to_string()));
    }
    let mut matrix = vec![0.0; d * d];
    for gr in grads {
        for i in 0..d {
            for j in 0..d {
                matrix[i * d + j] += gr[i] * gr[j] / n as f64;
            }
        }
    }
    Ok((0..d).map(|i| matrix[i * d + i]).sum())
}
