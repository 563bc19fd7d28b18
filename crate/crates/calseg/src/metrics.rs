//! Evaluation metrics: volumetric overlap, boundary distance, calibration
//! error, and temperature scaling.
//!
//! Geometry metrics work on hard masks. Calibration metrics work on
//! per-voxel probabilities of the foreground class; the confidence of a
//! voxel is the probability of whichever class was predicted,
//! `max(p, 1 - p)`, and a voxel counts as correct when the thresholded
//! prediction matches the label.
//!
//! The 95th-percentile Hausdorff distance uses an exact Euclidean distance
//! transform (separable lower-envelope-of-parabolas passes, one per axis,
//! with anisotropic voxel spacing folded into the coordinates), so it runs
//! in linear time per volume. A brute-force all-pairs oracle pins its
//! output in the tests.

use crate::error::{Error, Result};
use crate::formats::Mask;

/// Default bin count for calibration histograms.
pub const DEFAULT_BINS: usize = 15;
/// Percentile taken over the pooled boundary distances.
const HD_PERCENTILE: f64 = 0.95;
/// Golden-section search interval and tolerance for temperature fitting.
const TEMP_LO: f64 = 0.05;
const TEMP_HI: f64 = 20.0;
const TEMP_TOL: f64 = 1e-4;

/// One confidence bin of a reliability diagram. Empty bins keep zero
/// accuracy and confidence; `count` distinguishes them.
#[derive(Debug, Clone, PartialEq)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub accuracy: f64,
    pub confidence: f64,
}

/// Full calibration summary of one prediction stream.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationReport {
    /// Equal-width reliability bins underlying `ece`.
    pub bins: Vec<BinStat>,
    pub ece: f64,
    pub ace: f64,
    pub brier: f64,
    /// Number of voxels summarized.
    pub n: usize,
    /// Bin count used for both `ece` and `ace`.
    pub m_bins: usize,
}

impl CalibrationReport {
    /// Recomputes the expected calibration error from the stored bins.
    /// Always matches `ece` to within accumulation order.
    pub fn ece_from_bins(&self) -> f64 {
        weighted_gap(&self.bins, self.n)
    }
}

fn weighted_gap(bins: &[BinStat], n: usize) -> f64 {
    bins.iter().map(|b| b.count as f64 / n as f64 * (b.accuracy - b.confidence).abs()).sum()
}

/// Predicted class of a foreground probability; 0.5 maps to foreground.
pub fn predicted_label(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

/// Converts foreground probabilities and labels into the confidence /
/// correctness stream the calibration metrics consume.
pub fn confidence_and_correctness(probs: &[f64], labels: &[u8]) -> Result<(Vec<f64>, Vec<u8>)> {
    check_lengths("calibration", probs.len(), labels.len())?;
    let conf = probs.iter().map(|&p| p.max(1.0 - p)).collect();
    let correct = probs.iter().zip(labels).map(|(&p, &y)| u8::from(predicted_label(p) == y)).collect();
    Ok((conf, correct))
}

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::InvalidArgument(format!("{what}: stream lengths {a} and {b} differ")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument(format!("{what}: empty stream")));
    }
    Ok(())
}

fn check_bins(m_bins: usize) -> Result<()> {
    if m_bins == 0 {
        return Err(Error::InvalidArgument("bin count must be at least 1".to_string()));
    }
    Ok(())
}

/// Dice similarity coefficient of two hard masks:
/// `2|P ∩ T| / (|P| + |T|)`, with two empty masks defined as 1.0.
pub fn dsc(pred: &Mask, truth: &Mask) -> Result<f64> {
    if pred.dims != truth.dims {
        return Err(Error::shape("dsc", format!("mask dims {:?} vs {:?}", pred.dims, truth.dims)));
    }
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        inter += usize::from(p == 1 && t == 1);
        total += usize::from(p == 1) + usize::from(t == 1);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Linear indices of foreground voxels with at least one six-connected
/// background neighbor. Voxels beyond the grid count as background, so
/// foreground touching the volume face is boundary.
fn boundary_voxels(mask: &Mask) -> Vec<usize> {
    let [nx, ny, nz] = mask.dims;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let idx = mask.index(x, y, z);
                if mask.data[idx] != 1 {
                    continue;
                }
                let bg = |xx: isize, yy: isize, zz: isize| -> bool {
                    if xx < 0 || yy < 0 || zz < 0 || xx >= nx as isize || yy >= ny as isize || zz >= nz as isize {
                        return true;
                    }
                    mask.data[mask.index(xx as usize, yy as usize, zz as usize)] == 0
                };
                let (xi, yi, zi) = (x as isize, y as isize, z as isize);
                if bg(xi - 1, yi, zi)
                    || bg(xi + 1, yi, zi)
                    || bg(xi, yi - 1, zi)
                    || bg(xi, yi + 1, zi)
                    || bg(xi, yi, zi - 1)
                    || bg(xi, yi, zi + 1)
                {
                    out.push(idx);
                }
            }
        }
    }
    out
}

/// One pass of the exact distance transform along an axis: replaces `f`
/// (squared distances so far) with the lower envelope of parabolas rooted
/// at `coords` (physical positions, strictly increasing). Entries of
/// infinity carry "no site yet" and contribute no parabola.
fn dt_one_dim(f: &[f64], coords: &[f64], out: &mut [f64]) {
    let n = f.len();
    let mut hull: Vec<usize> = Vec::with_capacity(n);
    let mut cuts: Vec<f64> = vec![0.0; n + 1];
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        let mut s = 0.0;
        while let Some(&r) = hull.last() {
            // Intersection of the parabolas rooted at coords[q] and coords[r].
            s = ((f[q] + coords[q] * coords[q]) - (f[r] + coords[r] * coords[r])) / (2.0 * (coords[q] - coords[r]));
            if s <= cuts[hull.len() - 1] {
                hull.pop();
            } else {
                break;
            }
        }
        if hull.is_empty() {
            cuts[0] = f64::NEG_INFINITY;
        } else {
            cuts[hull.len()] = s;
        }
        hull.push(q);
        cuts[hull.len()] = f64::INFINITY;
    }
    if hull.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for q in 0..n {
        while cuts[k + 1] < coords[q] {
            k += 1;
        }
        let r = hull[k];
        let d = coords[q] - coords[r];
        out[q] = d * d + f[r];
    }
}

/// Exact squared Euclidean distance (in millimeters) from every voxel to
/// the nearest seed voxel, on an anisotropic grid.
fn edt_squared(dims: [usize; 3], spacing: [f64; 3], seeds: &[bool]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut field: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();

    let index = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let coords =
        |n: usize, s: f64| -> Vec<f64> { (0..n).map(|i| i as f64 * s).collect() };

    // Axis passes in x, y, z order; each pass reads the previous field and
    // writes the envelope along its own axis.
    let cx = coords(nx, spacing[0]);
    let mut line = vec![0.0; nx];
    let mut out = vec![0.0; nx];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                line[x] = field[index(x, y, z)];
            }
            dt_one_dim(&line, &cx, &mut out);
            for x in 0..nx {
                field[index(x, y, z)] = out[x];
            }
        }
    }

    let cy = coords(ny, spacing[1]);
    let mut line = vec![0.0; ny];
    let mut out = vec![0.0; ny];
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = field[index(x, y, z)];
            }
            dt_one_dim(&line, &cy, &mut out);
            for y in 0..ny {
                field[index(x, y, z)] = out[y];
            }
        }
    }

    let cz = coords(nz, spacing[2]);
    let mut line = vec![0.0; nz];
    let mut out = vec![0.0; nz];
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = field[index(x, y, z)];
            }
            dt_one_dim(&line, &cz, &mut out);
            for z in 0..nz {
                field[index(x, y, z)] = out[z];
            }
        }
    }

    field
}

/// 95th-percentile Hausdorff distance in millimeters between two mask
/// boundaries: both directed nearest-boundary distance sets are pooled and
/// the percentile is taken once, which makes the measure symmetric.
/// Returns `Ok(None)` when either mask has no foreground — the distance is
/// undefined there and callers exclude such samples from averages.
pub fn hd95(pred: &Mask, truth: &Mask) -> Result<Option<f64>> {
    if pred.dims != truth.dims {
        return Err(Error::shape("hd95", format!("mask dims {:?} vs {:?}", pred.dims, truth.dims)));
    }
    if pred.spacing != truth.spacing {
        return Err(Error::shape("hd95", format!("mask spacing {:?} vs {:?}", pred.spacing, truth.spacing)));
    }
    let bp = boundary_voxels(pred);
    let bt = boundary_voxels(truth);
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }

    let seeds_of = |idxs: &[usize], n: usize| {
        let mut s = vec![false; n];
        for &i in idxs {
            s[i] = true;
        }
        s
    };
    let n = pred.voxels();
    let to_truth = edt_squared(pred.dims, pred.spacing, &seeds_of(&bt, n));
    let to_pred = edt_squared(pred.dims, pred.spacing, &seeds_of(&bp, n));

    let mut pooled: Vec<f64> = Vec::with_capacity(bp.len() + bt.len());
    pooled.extend(bp.iter().map(|&i| to_truth[i].sqrt()));
    pooled.extend(bt.iter().map(|&i| to_pred[i].sqrt()));
    pooled.sort_by(f64::total_cmp);
    Ok(Some(percentile_sorted(&pooled, HD_PERCENTILE)))
}

/// Percentile of an ascending-sorted slice with linear interpolation
/// between adjacent order statistics.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let rank = q * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + frac * (sorted[lo + 1] - sorted[lo])
}

/// Expected calibration error with equal-width confidence bins on [0, 1]:
/// `Σ (|B|/n) · |accuracy(B) - confidence(B)|`. Confidence exactly 1.0
/// falls in the last bin. Also returns the reliability bins.
pub fn ece(confidences: &[f64], correctness: &[u8], m_bins: usize) -> Result<(f64, Vec<BinStat>)> {
    check_lengths("ece", confidences.len(), correctness.len())?;
    check_bins(m_bins)?;
    let n = confidences.len();
    let mut count = vec![0usize; m_bins];
    let mut acc_sum = vec![0.0; m_bins];
    let mut conf_sum = vec![0.0; m_bins];
    for (&c, &ok) in confidences.iter().zip(correctness) {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidArgument(format!("confidence {c} outside [0, 1]")));
        }
        let b = ((c * m_bins as f64) as usize).min(m_bins - 1);
        count[b] += 1;
        acc_sum[b] += f64::from(ok);
        conf_sum[b] += c;
    }
    let bins: Vec<BinStat> = (0..m_bins)
        .map(|b| BinStat {
            lo: b as f64 / m_bins as f64,
            hi: (b + 1) as f64 / m_bins as f64,
            count: count[b],
            accuracy: if count[b] > 0 { acc_sum[b] / count[b] as f64 } else { 0.0 },
            confidence: if count[b] > 0 { conf_sum[b] / count[b] as f64 } else { 0.0 },
        })
        .collect();
    Ok((weighted_gap(&bins, n), bins))
}

/// Adaptive calibration error: samples are sorted by confidence and split
/// into `m_bins` consecutive equal-mass chunks (the first `n mod m` chunks
/// take one extra sample), then the same count-weighted gap is summed.
/// Bin bounds are the chunk's observed confidence range.
pub fn ace(confidences: &[f64], correctness: &[u8], m_bins: usize) -> Result<(f64, Vec<BinStat>)> {
    check_lengths("ace", confidences.len(), correctness.len())?;
    check_bins(m_bins)?;
    let n = confidences.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| confidences[a].total_cmp(&confidences[b]));

    let base = n / m_bins;
    let extra = n % m_bins;
    let mut bins = Vec::with_capacity(m_bins);
    let mut start = 0usize;
    for b in 0..m_bins {
        let size = base + usize::from(b < extra);
        let chunk = &order[start..start + size];
        start += size;
        if chunk.is_empty() {
            bins.push(BinStat { lo: 0.0, hi: 0.0, count: 0, accuracy: 0.0, confidence: 0.0 });
            continue;
        }
        let acc = chunk.iter().map(|&i| f64::from(correctness[i])).sum::<f64>() / size as f64;
        let conf = chunk.iter().map(|&i| confidences[i]).sum::<f64>() / size as f64;
        bins.push(BinStat {
            lo: confidences[chunk[0]],
            hi: confidences[*chunk.last().unwrap()],
            count: size,
            accuracy: acc,
            confidence: conf,
        });
    }
    Ok((weighted_gap(&bins, n), bins))
}

/// Brier score: mean squared error between foreground probabilities and
/// 0/1 labels.
pub fn brier(probs: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths("brier", probs.len(), labels.len())?;
    let n = probs.len() as f64;
    Ok(probs.iter().zip(labels).map(|(&p, &y)| (p - f64::from(y)).powi(2)).sum::<f64>() / n)
}

/// Domain generalization gap: source-domain metric minus target-domain
/// metric, signed. Smaller means better transfer; negative means the
/// target outperformed the source.
pub fn dgg(metric_source: f64, metric_target: f64) -> f64 {
    metric_source - metric_target
}

/// Builds the complete calibration summary of one probability stream.
pub fn calibration_report(probs: &[f64], labels: &[u8], m_bins: usize) -> Result<CalibrationReport> {
    let (conf, correct) = confidence_and_correctness(probs, labels)?;
    let (ece_v, bins) = ece(&conf, &correct, m_bins)?;
    let (ace_v, _) = ace(&conf, &correct, m_bins)?;
    let brier_v = brier(probs, labels)?;
    Ok(CalibrationReport { bins, ece: ece_v, ace: ace_v, brier: brier_v, n: probs.len(), m_bins })
}

/// Result of fitting a softmax temperature on held-out logits.
#[derive(Debug, Clone, PartialEq)]
pub struct TemperatureFit {
    pub temperature: f64,
    /// Mean negative log-likelihood at T = 1 (no scaling).
    pub nll_uncalibrated: f64,
    /// Mean negative log-likelihood at the fitted temperature.
    pub nll_calibrated: f64,
    /// Expected calibration error after scaling, on the fitting stream.
    pub ece_calibrated: f64,
}

fn mean_nll(logits: &[f64], labels: &[u8], temperature: f64) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&s, &y)| {
            let st = s / temperature;
            // softplus(-st) for foreground, softplus(st) for background.
            let sp = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
            if y == 1 {
                sp(-st)
            } else {
                sp(st)
            }
        })
        .sum::<f64>()
        / n
}

/// Fits a scalar temperature by minimizing the mean negative
/// log-likelihood of `sigmoid(logit / T)` with golden-section search on
/// `T ∈ [0.05, 20]`. The NLL is convex in `1/T`, hence unimodal in `T`,
/// which is all golden-section needs. Dividing logits by a positive
/// temperature never moves a logit across zero, so thresholded masks (and
/// with them DSC and HD95) are unchanged by scaling.
pub fn temperature_scale(logits: &[f64], labels: &[u8], m_bins: usize) -> Result<TemperatureFit> {
    check_lengths("temperature_scale", logits.len(), labels.len())?;
    check_bins(m_bins)?;
    let first = labels[0];
    if labels.iter().all(|&y| y == first) {
        return Err(Error::InvalidArgument(
            "temperature fitting needs both classes in the validation labels".to_string(),
        ));
    }

    let mut lo = TEMP_LO;
    let mut hi = TEMP_HI;
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = mean_nll(logits, labels, a);
    let mut fb = mean_nll(logits, labels, b);
    while hi - lo > TEMP_TOL {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = mean_nll(logits, labels, a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = mean_nll(logits, labels, b);
        }
    }
    let mut t = 0.5 * (lo + hi);
    let nll_one = mean_nll(logits, labels, 1.0);
    // T = 1 lies inside the search interval, so the optimum can never be
    // worse than no scaling; enforce that under float noise.
    if mean_nll(logits, labels, t) > nll_one {
        t = 1.0;
    }

    let scaled_probs: Vec<f64> = logits.iter().map(|&s| logistic(s / t)).collect();
    let (conf, correct) = confidence_and_correctness(&scaled_probs, labels)?;
    let (ece_cal, _) = ece(&conf, &correct, m_bins)?;
    Ok(TemperatureFit {
        temperature: t,
        nll_uncalibrated: nll_one,
        nll_calibrated: mean_nll(logits, labels, t),
        ece_calibrated: ece_cal,
    })
}

pub(crate) fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
