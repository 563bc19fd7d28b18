//! Shared oracles for the integration tests.
//!
//! Everything here is deliberately naive: central finite differences for
//! gradients and brute-force scans for geometry. The library is checked
//! against these references, never the other way around.

#![allow(dead_code)]

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// Step used by the central-difference oracle.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for op-level gradient agreement.
pub const OP_GRAD_RTOL: f64 = 1e-6;
/// Relative tolerance for loss-level gradient agreement.
pub const LOSS_GRAD_RTOL: f64 = 1e-5;
/// Denominators below this floor are treated as this floor, so near-zero
/// gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-8;

/// Deterministic test RNG. All draws derive from the explicit seed.
pub struct TestRng(ChaCha8Rng);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Uniform draw in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.0.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        (self.0.next_u64() % n as u64) as usize
    }

    /// Vector of uniform draws in `[lo, hi)`.
    pub fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }

    /// Vector of draws bounded away from zero: magnitude in `[gap, hi)`,
    /// random sign. Used where an op's derivative has a kink at zero.
    pub fn vec_away_from_zero(&mut self, n: usize, gap: f64, hi: f64) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let mag = self.range(gap, hi);
                if self.uniform() < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
            .collect()
    }
}

/// Central finite difference of a scalar function over several flat inputs.
/// Returns one gradient buffer per input, in order.
pub fn fd_gradients<F>(f: F, inputs: &[Vec<f64>], h: f64) -> Vec<Vec<f64>>
where
    F: Fn(&[Vec<f64>]) -> f64,
{
    let mut grads = Vec::with_capacity(inputs.len());
    for which in 0..inputs.len() {
        let mut g = vec![0.0; inputs[which].len()];
        for i in 0..inputs[which].len() {
            let mut plus = inputs.to_vec();
            plus[which][i] += h;
            let mut minus = inputs.to_vec();
            minus[which][i] -= h;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Largest elementwise relative error between two buffers, with the
/// denominator floored so comparisons near zero degrade to absolute error.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "buffers must have equal length");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// All-pairs 95th-percentile Hausdorff oracle: quadratic nearest-boundary
/// scan, no distance transform. Returns `None` when either mask is empty.
pub fn hd95_brute(pred: &calseg::formats::Mask, truth: &calseg::formats::Mask) -> Option<f64> {
    let bp = brute_boundary(pred);
    let bt = brute_boundary(truth);
    if bp.is_empty() || bt.is_empty() {
        return None;
    }
    let s = pred.spacing;
    let dist = |a: &[i64; 3], b: &[i64; 3]| -> f64 {
        let dx = (a[0] - b[0]) as f64 * s[0];
        let dy = (a[1] - b[1]) as f64 * s[1];
        let dz = (a[2] - b[2]) as f64 * s[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    };
    let nearest = |from: &[[i64; 3]], to: &[[i64; 3]]| -> Vec<f64> {
        from.iter().map(|a| to.iter().map(|b| dist(a, b)).fold(f64::INFINITY, f64::min)).collect()
    };
    let mut pooled = nearest(&bp, &bt);
    pooled.extend(nearest(&bt, &bp));
    pooled.sort_by(f64::total_cmp);
    let rank = 0.95 * (pooled.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    Some(if lo + 1 < pooled.len() {
        pooled[lo] + frac * (pooled[lo + 1] - pooled[lo])
    } else {
        pooled[lo]
    })
}

/// Foreground voxels with a six-connected background (or out-of-grid)
/// neighbor, as integer coordinates.
fn brute_boundary(mask: &calseg::formats::Mask) -> Vec<[i64; 3]> {
    let [nx, ny, nz] = mask.dims;
    let at = |x: i64, y: i64, z: i64| -> u8 {
        if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
            return 0;
        }
        mask.data[x as usize + nx * (y as usize + ny * z as usize)]
    };
    let mut out = Vec::new();
    for z in 0..nz as i64 {
        for y in 0..ny as i64 {
            for x in 0..nx as i64 {
                if at(x, y, z) == 1
                    && [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
                        .iter()
                        .any(|&(dx, dy, dz)| at(x + dx, y + dy, z + dz) == 0)
                {
                    out.push([x, y, z]);
                }
            }
        }
    }
    out
}
