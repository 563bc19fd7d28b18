//! Synthetic multi-center segmentation corpus.
//!
//! Samples are 3D volumes with textured background, a soft head region, and
//! one to three smoothed ellipsoid lesions. Ground-truth masks come from the
//! lesion geometry alone, so acquisition-side transforms (vendor shift,
//! motion corruption) never touch the labels: every shift in this corpus is
//! covariate shift by construction.
//!
//! Randomness is fully explicit. Each sample owns a generator seed; named
//! streams (texture, lesions, noise) are derived from it with a splitmix
//! hash, so regenerating a sample is bit-reproducible and adding a new
//! stream does not disturb existing ones.
//!
//! Center identity perturbs texture frequency and the lesion size range.
//! Vendor B applies a global intensity gain, a linear bias field along the
//! x axis, and additive Gaussian noise. Motion corruption applies an
//! axial box blur plus faint ghost echoes at fixed severity levels.

use std::fmt;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::formats::{self, Mask, Volume};
use crate::rng::{stream_seed, uniform, uniform_in, GaussStream};

/// Corpus generation parameters. Defaults describe the desk-scale corpus:
/// three centers, 32-cubed voxels, scanner-split protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Grid extent per axis.
    pub shape: [usize; 3],
    /// Voxel spacing in millimeters.
    pub spacing_mm: [f64; 3],
    /// Number of acquisition centers.
    pub centers: usize,
    /// Training samples generated per center. The evaluation set gets half
    /// as many base samples per center (rounded up), each materialized as a
    /// vendor-A / vendor-B pair under the scanner protocol.
    pub n_per_center: usize,
    /// Split protocol for the corpus.
    pub protocol: Protocol,
    /// Corpus seed; every sample seed derives from it.
    pub seed: u64,
    /// Width of the Gaussian prompt encoding, in millimeters.
    pub gaussian_sigma_mm: f64,
    /// Vendor B multiplicative gain.
    pub vendor_gain: f64,
    /// Vendor B bias field amplitude; the bias ramps linearly from 0 to
    /// this value along x.
    pub vendor_bias: f64,
    /// Vendor B additive Gaussian noise, standard deviation.
    pub vendor_noise_sigma: f64,
    /// Lesion intensity bump over the local background.
    pub lesion_contrast: f64,
    /// Width of the lesion intensity falloff, in normalized ellipsoid
    /// radius units. Larger values blur the lesion boundary and make voxels
    /// near it genuinely ambiguous.
    pub boundary_softness: f64,
    /// Amplitude of the fine texture octave relative to the coarse one.
    pub texture_fine_amplitude: f64,
    /// Motion severity applied to target-domain volumes (0 disables).
    pub target_motion: u8,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            shape: [32, 32, 32],
            spacing_mm: [1.0, 1.0, 1.0],
            centers: 3,
            n_per_center: 20,
            protocol: Protocol::Scanner,
            seed: 1000,
            gaussian_sigma_mm: 2.0,
            vendor_gain: 1.15,
            vendor_bias: 0.1,
            vendor_noise_sigma: 0.03,
            lesion_contrast: 0.3,
            boundary_softness: 0.35,
            texture_fine_amplitude: 0.05,
            target_motion: 0,
        }
    }
}

/// How the corpus is carved into train and evaluation sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// Train on vendor A, evaluate on paired vendor A (source) and vendor B
    /// (target) samples with unseen anatomy.
    Scanner,
    /// Leave-one-center-out folds over vendor-A samples.
    Loco,
}

/// Acquisition vendor of a materialized sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Vendor {
    A,
    B,
}

impl fmt::Display for Vendor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Vendor::A => write!(f, "A"),
            Vendor::B => write!(f, "B"),
        }
    }
}

/// Role of a sample within the split plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Train,
    SourceEval,
    TargetEval,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Train => write!(f, "train"),
            Role::SourceEval => write!(f, "source-eval"),
            Role::TargetEval => write!(f, "target-eval"),
        }
    }
}

impl std::str::FromStr for Role {
    type Err = Error;
    fn from_str(s: &str) -> Result<Role> {
        match s {
            "train" => Ok(Role::Train),
            "source-eval" => Ok(Role::SourceEval),
            "target-eval" => Ok(Role::TargetEval),
            other => Err(Error::Data(format!("unknown role {other:?}"))),
        }
    }
}

/// Everything needed to re-materialize one sample.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SampleSpec {
    pub id: String,
    pub center: usize,
    pub vendor: Vendor,
    pub role: Role,
    pub gen_seed: u64,
}

/// Train/evaluation id lists. For the scanner protocol the fold list is
/// empty; for leave-one-center-out it holds one fold per center and the
/// top-level lists are empty.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitPlan {
    pub protocol: Protocol,
    pub train: Vec<String>,
    pub source_eval: Vec<String>,
    pub target_eval: Vec<String>,
    pub folds: Vec<Fold>,
}

/// One leave-one-center-out fold. `source_eval` names the training samples
/// reused for in-domain metrics (the corpus is too small to hold out a
/// separate source set without shrinking the folds).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Fold {
    pub held_out_center: usize,
    pub train: Vec<String>,
    pub source_eval: Vec<String>,
    pub test: Vec<String>,
}

/// Prompt geometry derived from a ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoints {
    /// Foreground click: mask centroid, snapped to the nearest foreground
    /// voxel when the rounded centroid falls outside the mask.
    pub fg: [usize; 3],
    /// Background click: far from the centroid and outside the mask.
    pub bg: [usize; 3],
    /// Inclusive bounding box of the foreground, `(min, max)`.
    pub bbox: ([usize; 3], [usize; 3]),
}

const STREAM_TEXTURE: u64 = 1;
const STREAM_LESION: u64 = 2;
const STREAM_VENDOR_NOISE: u64 = 3;
const STREAM_MOTION: u64 = 4;

/// Smooth value-noise field: random lattice values interpolated
/// trilinearly, sampled at `period`-voxel intervals.
struct ValueNoise {
    lattice: Vec<f64>,
    dims: [usize; 3],
    period: f64,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, shape: [usize; 3], period: f64) -> ValueNoise {
        let dims = [
            ((shape[0] - 1) as f64 / period).floor() as usize + 2,
            ((shape[1] - 1) as f64 / period).floor() as usize + 2,
            ((shape[2] - 1) as f64 / period).floor() as usize + 2,
        ];
        let lattice = (0..dims[0] * dims[1] * dims[2]).map(|_| uniform(rng)).collect();
        ValueNoise { lattice, dims, period }
    }

    fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        let sample = |c: usize| -> (usize, f64) {
            let t = c as f64 / self.period;
            let i = t.floor() as usize;
            (i, t - i as f64)
        };
        let (i, fx) = sample(x);
        let (j, fy) = sample(y);
        let (k, fz) = sample(z);
        let l = |i: usize, j: usize, k: usize| self.lattice[i + self.dims[0] * (j + self.dims[1] * k)];
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(l(i, j, k), l(i + 1, j, k), fx);
        let c10 = lerp(l(i, j + 1, k), l(i + 1, j + 1, k), fx);
        let c01 = lerp(l(i, j, k + 1), l(i + 1, j, k + 1), fx);
        let c11 = lerp(l(i, j + 1, k + 1), l(i + 1, j + 1, k + 1), fx);
        lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi_axes: [f64; 3],
}

impl Ellipsoid {
    /// Normalized squared radius: 1 on the surface, < 1 inside.
    fn rho(&self, x: f64, y: f64, z: f64) -> f64 {
        let dx = (x - self.center[0]) / self.semi_axes[0];
        let dy = (y - self.center[1]) / self.semi_axes[1];
        let dz = (z - self.center[2]) / self.semi_axes[2];
        dx * dx + dy * dy + dz * dz
    }
}

/// Generate the clean (pre-corruption) volume and its mask for one sample.
/// The mask depends only on `gen_seed`, `center`, and the geometry
/// parameters, never on vendor or corruption settings.
pub fn generate_clean(cfg: &DataConfig, gen_seed: u64, center: usize) -> Result<(Volume, Mask)> {
    validate(cfg)?;
    let [nx, ny, nz] = cfg.shape;
    // Center identity shifts texture frequency and lesion sizes.
    let freq_scale = 1.0 + 0.15 * center as f64;
    let size_scale = 1.0 + 0.1 * center as f64;

    let mut tex_rng = ChaCha8Rng::seed_from_u64(stream_seed(gen_seed, STREAM_TEXTURE));
    let coarse = ValueNoise::new(&mut tex_rng, cfg.shape, 8.0 / freq_scale);
    let fine = ValueNoise::new(&mut tex_rng, cfg.shape, 2.5);

    let mut lesion_rng = ChaCha8Rng::seed_from_u64(stream_seed(gen_seed, STREAM_LESION));
    let n_lesions = 1 + (lesion_rng.next_u64() % 3) as usize;
    let lesions: Vec<Ellipsoid> = (0..n_lesions)
        .map(|_| {
            let center = [
                uniform_in(&mut lesion_rng, 0.3 * nx as f64, 0.7 * nx as f64),
                uniform_in(&mut lesion_rng, 0.3 * ny as f64, 0.7 * ny as f64),
                uniform_in(&mut lesion_rng, 0.3 * nz as f64, 0.7 * nz as f64),
            ];
            let semi_axes = [
                uniform_in(&mut lesion_rng, 2.2, 4.8) * size_scale,
                uniform_in(&mut lesion_rng, 2.2, 4.8) * size_scale,
                uniform_in(&mut lesion_rng, 2.2, 4.8) * size_scale,
            ];
            Ellipsoid { center, semi_axes }
        })
        .collect();

    let head_center = [(nx - 1) as f64 / 2.0, (ny - 1) as f64 / 2.0, (nz - 1) as f64 / 2.0];
    let head_radius = 0.42 * nx.min(ny).min(nz) as f64;
    let amp_fine = cfg.texture_fine_amplitude;

    let n = nx * ny * nz;
    let mut data = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let tex = (coarse.at(x, y, z) + amp_fine * fine.at(x, y, z)) / (1.0 + amp_fine);
                let dx = x as f64 - head_center[0];
                let dy = y as f64 - head_center[1];
                let dz = z as f64 - head_center[2];
                let head = logistic((head_radius - (dx * dx + dy * dy + dz * dz).sqrt()) / 2.0);
                let mut value = head * (0.3 + 0.3 * tex);
                let mut inside = false;
                for les in &lesions {
                    let rho = les.rho(x as f64, y as f64, z as f64);
                    value += cfg.lesion_contrast * logistic((1.0 - rho) / cfg.boundary_softness);
                    inside |= rho <= 1.0;
                }
                data.push(value.clamp(0.0, 1.0));
                labels.push(inside as u8);
            }
        }
    }
    let vol = Volume::new(cfg.shape, cfg.spacing_mm, data)?;
    let mask = Mask::new(cfg.shape, cfg.spacing_mm, labels)?;
    Ok((vol, mask))
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        validate(self)
    }
}

fn validate(cfg: &DataConfig) -> Result<()> {
    if cfg.shape.iter().any(|&d| d < 8) {
        return Err(Error::InvalidArgument(format!("volume shape {:?} is too small, need at least 8 per axis", cfg.shape)));
    }
    if cfg.boundary_softness <= 0.0 {
        return Err(Error::InvalidArgument("boundary_softness must be positive".to_string()));
    }
    if cfg.centers == 0 || cfg.n_per_center == 0 {
        return Err(Error::InvalidArgument("centers and n_per_center must be positive".to_string()));
    }
    Ok(())
}

/// Vendor B acquisition model: global gain, linear bias ramp along x, and
/// additive Gaussian noise. The result is intentionally not re-clamped so
/// the intensity statistics shift cleanly.
pub fn vendor_shift(cfg: &DataConfig, v: &Volume, gen_seed: u64) -> Volume {
    let [nx, ny, nz] = v.dims;
    let mut noise = GaussStream::new(stream_seed(gen_seed, STREAM_VENDOR_NOISE));
    let mut data = Vec::with_capacity(v.data.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let bias = cfg.vendor_bias * x as f64 / (nx - 1).max(1) as f64;
                let value = cfg.vendor_gain * v.data[v.index(x, y, z)] + bias + cfg.vendor_noise_sigma * noise.next();
                data.push(value);
            }
        }
    }
    Volume { dims: v.dims, spacing: v.spacing, data }
}

/// Motion corruption at severity 1 to 3: an axial box blur (3, 5, or 7
/// voxels along z, replicated edges) plus ghost echoes at 10% amplitude
/// relative to the main image. Severity 2 adds one echo displaced 2 voxels;
/// severity 3 adds echoes at 2 and 4 voxels. The mix is normalized so the
/// echoes redistribute signal energy instead of adding to it, keeping the
/// overall intensity variance strictly below the uncorrupted volume's. The
/// echo direction sign is drawn from `seed`. Severity 0 returns the volume
/// unchanged.
pub fn apply_motion(v: &Volume, severity: u8, seed: u64) -> Result<Volume> {
    if severity == 0 {
        return Ok(v.clone());
    }
    if severity > 3 {
        return Err(Error::InvalidArgument(format!("motion severity {severity} out of range 0..=3")));
    }
    let width = [3usize, 5, 7][severity as usize - 1];
    let half = width / 2;
    let [nx, ny, nz] = v.dims;

    let mut blurred = vec![0.0; v.data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for dz in 0..width {
                    let zz = (z + dz).saturating_sub(half).min(nz - 1);
                    acc += v.data[v.index(x, y, zz)];
                }
                blurred[v.index(x, y, z)] = acc / width as f64;
            }
        }
    }

    let shifts: &[usize] = match severity {
        1 => &[],
        2 => &[2],
        _ => &[2, 4],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, STREAM_MOTION));
    let sign_up = rng.next_u64() & 1 == 0;
    let mut data = blurred.clone();
    for &shift in shifts {
        for z in 0..nz {
            let src = if sign_up { (z + shift) % nz } else { (z + nz - shift % nz) % nz };
            for y in 0..ny {
                for x in 0..nx {
                    data[v.index(x, y, z)] += 0.1 * blurred[v.index(x, y, src)];
                }
            }
        }
    }
    let norm = 1.0 / (1.0 + 0.1 * shifts.len() as f64);
    for value in &mut data {
        *value *= norm;
    }
    Ok(Volume { dims: v.dims, spacing: v.spacing, data })
}

/// Materialize the volume/mask pair for a sample spec, applying its
/// vendor's acquisition model and any configured target-domain motion.
pub fn materialize(cfg: &DataConfig, spec: &SampleSpec) -> Result<(Volume, Mask)> {
    let (clean, mask) = generate_clean(cfg, spec.gen_seed, spec.center)?;
    let mut vol = match spec.vendor {
        Vendor::A => clean,
        Vendor::B => vendor_shift(cfg, &clean, spec.gen_seed),
    };
    if cfg.target_motion > 0 && spec.role == Role::TargetEval {
        vol = apply_motion(&vol, cfg.target_motion, spec.gen_seed)?;
    }
    Ok((vol, mask))
}

/// Derive prompt geometry from a mask. Fails on an empty mask.
pub fn prompt_from_mask(mask: &Mask) -> Result<PromptPoints> {
    let [nx, ny, nz] = mask.dims;
    let mut count = 0usize;
    let mut sum = [0.0f64; 3];
    let mut bmin = [usize::MAX; 3];
    let mut bmax = [0usize; 3];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.data[mask.index(x, y, z)] == 1 {
                    count += 1;
                    sum[0] += x as f64;
                    sum[1] += y as f64;
                    sum[2] += z as f64;
                    bmin = [bmin[0].min(x), bmin[1].min(y), bmin[2].min(z)];
                    bmax = [bmax[0].max(x), bmax[1].max(y), bmax[2].max(z)];
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("cannot derive prompts from an empty mask".to_string()));
    }
    let centroid = [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64];
    let rounded = [
        centroid[0].round() as usize,
        centroid[1].round() as usize,
        centroid[2].round() as usize,
    ];

    // Snap to the nearest foreground voxel when the centroid of several
    // lesions lands in background; ties break on scan order.
    let fg = if mask.data[mask.index(rounded[0], rounded[1], rounded[2])] == 1 {
        rounded
    } else {
        let mut best = rounded;
        let mut best_d = f64::INFINITY;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if mask.data[mask.index(x, y, z)] == 1 {
                        let d = sq_dist([x, y, z], centroid);
                        if d < best_d {
                            best_d = d;
                            best = [x, y, z];
                        }
                    }
                }
            }
        }
        best
    };

    // Background click: the inset corner farthest from the centroid always
    // clears a quarter of the volume diagonal; fall back to a full scan if
    // the mask somehow covers it.
    let diag = (((nx - 1) * (nx - 1) + (ny - 1) * (ny - 1) + (nz - 1) * (nz - 1)) as f64).sqrt();
    let need = 0.25 * diag;
    let corners = corner_candidates(mask.dims);
    let mut bg = None;
    let mut best_d = -1.0;
    for c in corners {
        let d = sq_dist(c, centroid).sqrt();
        if mask.data[mask.index(c[0], c[1], c[2])] == 0 && d >= need && d > best_d {
            best_d = d;
            bg = Some(c);
        }
    }
    let bg = match bg {
        Some(c) => c,
        None => farthest_background(mask, centroid, need)?,
    };

    Ok(PromptPoints { fg, bg, bbox: (bmin, bmax) })
}

fn corner_candidates(dims: [usize; 3]) -> [[usize; 3]; 8] {
    let [nx, ny, nz] = dims;
    let xs = [1, nx - 2];
    let ys = [1, ny - 2];
    let zs = [1, nz - 2];
    let mut out = [[0usize; 3]; 8];
    let mut i = 0;
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                out[i] = [x, y, z];
                i += 1;
            }
        }
    }
    out
}

fn farthest_background(mask: &Mask, centroid: [f64; 3], need: f64) -> Result<[usize; 3]> {
    let [nx, ny, nz] = mask.dims;
    let mut best = None;
    let mut best_d = -1.0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if mask.data[mask.index(x, y, z)] == 0 {
                    let d = sq_dist([x, y, z], centroid).sqrt();
                    if d > best_d {
                        best_d = d;
                        best = Some([x, y, z]);
                    }
                }
            }
        }
    }
    match best {
        Some(c) if best_d >= need => Ok(c),
        _ => Err(Error::Data("no background voxel far enough from the mask centroid".to_string())),
    }
}

fn sq_dist(p: [usize; 3], q: [f64; 3]) -> f64 {
    let dx = p[0] as f64 - q[0];
    let dy = p[1] as f64 - q[1];
    let dz = p[2] as f64 - q[2];
    dx * dx + dy * dy + dz * dz
}

/// Gaussian click encoding: `exp(-d^2 / (2 sigma^2))` with `d` the physical
/// distance to `point` in millimeters. Peaks at exactly 1 on the point.
pub fn encode_prompt_map(dims: [usize; 3], spacing: [f64; 3], point: [usize; 3], sigma_mm: f64) -> Result<Vec<f64>> {
    if sigma_mm <= 0.0 {
        return Err(Error::InvalidArgument(format!("prompt sigma must be positive, got {sigma_mm}")));
    }
    if point.iter().zip(&dims).any(|(&p, &d)| p >= d) {
        return Err(Error::InvalidArgument(format!("prompt point {point:?} outside dims {dims:?}")));
    }
    let [nx, ny, nz] = dims;
    let inv = 1.0 / (2.0 * sigma_mm * sigma_mm);
    let mut out = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let dx = (x as f64 - point[0] as f64) * spacing[0];
                let dy = (y as f64 - point[1] as f64) * spacing[1];
                let dz = (z as f64 - point[2] as f64) * spacing[2];
                out.push((-(dx * dx + dy * dy + dz * dz) * inv).exp());
            }
        }
    }
    Ok(out)
}

/// Build the sample list and split plan for a corpus.
///
/// Scanner protocol: per center, `n_per_center` vendor-A training samples
/// plus `ceil(n_per_center / 2)` evaluation base seeds, each materialized
/// twice with identical anatomy: once as vendor A (source evaluation) and
/// once as vendor B (target evaluation). Training and evaluation seeds
/// never overlap, so evaluation anatomy is unseen.
///
/// Leave-one-center-out: per center, `n_per_center` vendor-A samples; one
/// fold per center trains on the other centers and tests on the held-out
/// one.
pub fn build_splits(n_per_center: usize, centers: usize, protocol: Protocol, seed: u64) -> Result<(Vec<SampleSpec>, SplitPlan)> {
    if centers == 0 || n_per_center == 0 {
        return Err(Error::InvalidArgument("centers and n_per_center must be positive".to_string()));
    }
    let mut samples = Vec::new();
    let mut plan = SplitPlan {
        protocol,
        train: Vec::new(),
        source_eval: Vec::new(),
        target_eval: Vec::new(),
        folds: Vec::new(),
    };
    match protocol {
        Protocol::Scanner => {
            for c in 0..centers {
                for i in 0..n_per_center {
                    let id = format!("tr-c{c}-i{i:03}");
                    samples.push(SampleSpec {
                        id: id.clone(),
                        center: c,
                        vendor: Vendor::A,
                        role: Role::Train,
                        gen_seed: stream_seed(seed, pack_tag(0, c, i)),
                    });
                    plan.train.push(id);
                }
                let n_eval = n_per_center.div_ceil(2);
                for i in 0..n_eval {
                    let gen_seed = stream_seed(seed, pack_tag(1, c, i));
                    let src = format!("ev-c{c}-i{i:03}-src");
                    let tgt = format!("ev-c{c}-i{i:03}-tgt");
                    samples.push(SampleSpec {
                        id: src.clone(),
                        center: c,
                        vendor: Vendor::A,
                        role: Role::SourceEval,
                        gen_seed,
                    });
                    samples.push(SampleSpec {
                        id: tgt.clone(),
                        center: c,
                        vendor: Vendor::B,
                        role: Role::TargetEval,
                        gen_seed,
                    });
                    plan.source_eval.push(src);
                    plan.target_eval.push(tgt);
                }
            }
        }
        Protocol::Loco => {
            for c in 0..centers {
                for i in 0..n_per_center {
                    let id = format!("lo-c{c}-i{i:03}");
                    samples.push(SampleSpec {
                        id,
                        center: c,
                        vendor: Vendor::A,
                        role: Role::Train,
                        gen_seed: stream_seed(seed, pack_tag(2, c, i)),
                    });
                }
            }
            for held in 0..centers {
                let train: Vec<String> = samples
                    .iter()
                    .filter(|s| s.center != held)
                    .map(|s| s.id.clone())
                    .collect();
                let test: Vec<String> = samples
                    .iter()
                    .filter(|s| s.center == held)
                    .map(|s| s.id.clone())
                    .collect();
                // In-domain metrics reuse the tail of the training list.
                let k = train.len().div_ceil(4);
                let source_eval = train[train.len() - k..].to_vec();
                plan.folds.push(Fold { held_out_center: held, train, source_eval, test });
            }
        }
    }
    Ok((samples, plan))
}

/// Tag layout keeps train and evaluation seed streams disjoint.
fn pack_tag(kind: u64, center: usize, index: usize) -> u64 {
    (kind << 48) | ((center as u64) << 32) | index as u64
}

/// Manifest row naming the files of one materialized sample. Paths are
/// relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub spec: SampleSpec,
    pub volume: PathBuf,
    pub mask: PathBuf,
}

pub const MANIFEST_HEADER: &str = "sample_id,center,vendor,role,gen_seed,volume,mask";

/// Write the corpus to `dir`: one volume and mask file per sample plus a
/// manifest CSV tagged with the config hash.
pub fn write_corpus(dir: &Path, cfg: &DataConfig, config_hash: &str, samples: &[SampleSpec]) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::with_capacity(samples.len());
    let mut rows = Vec::with_capacity(samples.len());
    for spec in samples {
        let (vol, mask) = materialize(cfg, spec)?;
        let vol_rel = PathBuf::from(format!("{}.vol.cseg", spec.id));
        let mask_rel = PathBuf::from(format!("{}.mask.cseg", spec.id));
        formats::write_volume(&dir.join(&vol_rel), &vol)?;
        formats::write_mask(&dir.join(&mask_rel), &mask)?;
        rows.push(format!(
            "{},{},{},{},{},{},{}",
            spec.id,
            spec.center,
            spec.vendor,
            spec.role,
            spec.gen_seed,
            vol_rel.display(),
            mask_rel.display()
        ));
        entries.push(ManifestEntry { spec: spec.clone(), volume: vol_rel, mask: mask_rel });
    }
    formats::write_csv(&dir.join("manifest.csv"), config_hash, MANIFEST_HEADER, &rows)?;
    Ok(entries)
}

/// Read a manifest written by [`write_corpus`].
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join("manifest.csv");
    let csv = formats::read_csv(&path)?;
    let expect: Vec<&str> = MANIFEST_HEADER.split(',').collect();
    if csv.header != expect {
        return Err(Error::format(&path, format!("unexpected manifest header {:?}", csv.header)));
    }
    let mut entries = Vec::with_capacity(csv.rows.len());
    for row in &csv.rows {
        let vendor = match row[2].as_str() {
            "A" => Vendor::A,
            "B" => Vendor::B,
            other => return Err(Error::format(&path, format!("unknown vendor {other:?}"))),
        };
        let spec = SampleSpec {
            id: row[0].clone(),
            center: row[1].parse().map_err(|_| Error::format(&path, format!("bad center {:?}", row[1])))?,
            vendor,
            role: row[3].parse()?,
            gen_seed: row[4].parse().map_err(|_| Error::format(&path, format!("bad gen_seed {:?}", row[4])))?,
        };
        entries.push(ManifestEntry {
            spec,
            volume: PathBuf::from(&row[5]),
            mask: PathBuf::from(&row[6]),
        });
    }
    Ok(entries)
}
