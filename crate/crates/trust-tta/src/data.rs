//! Deterministic synthetic dataset and the corruption suite.
//!
//! Eight texture classes on 16×16 grayscale images in [0,1]: four bar
//! orientations, two checkerboard phases, two radial-gradient polarities.
//! Every sample carries seeded jitter (position, intensity, pixel noise) so
//! classes have within-class variation while staying separable for a
//! nearest-centroid classifier on raw pixels.
//!
//! Corruptions come in five kinds at severities 0..=5 with monotone
//! parameter tables; severity 0 is the identity transform, bit-exactly.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CLASSES: usize = 8;
pub const SIDE: usize = 16;

/// Stable per-phase seed derivation (FNV-1a over the phase label, mixed with
/// the base seed) so data, corruption, and batch-order streams are
/// independently reproducible.
pub fn phase_seed(base: u64, phase: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in phase.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ base.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    /// [n, SIDE, SIDE] row-major.
    pub images: Vec<f64>,
    pub labels: Vec<usize>,
    pub n: usize,
    pub seed: u64,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

impl SyntheticDataset {
    fn gather(&self, idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let px = SIDE * SIDE;
        let mut images = Vec::with_capacity(idx.len() * px);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            images.extend_from_slice(&self.images[i * px..(i + 1) * px]);
            labels.push(self.labels[i]);
        }
        (images, labels)
    }

    pub fn train_split(&self) -> (Vec<f64>, Vec<usize>) {
        self.gather(&self.train_idx)
    }

    pub fn test_split(&self) -> (Vec<f64>, Vec<usize>) {
        self.gather(&self.test_idx)
    }
}

/// Generate `n` class-balanced samples (n must be a multiple of 8) with an
/// 80/20 stratified train/test split. Bit-identical for equal seeds.
pub fn gen_dataset(seed: u64, n: usize) -> Result<SyntheticDataset> {
    if n == 0 || n % CLASSES != 0 {
        return Err(Error::InvalidArgument(format!(
            "dataset size must be a positive multiple of {CLASSES}, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(seed, "dataset"));
    let px = SIDE * SIDE;
    let mut images = Vec::with_capacity(n * px);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % CLASSES;
        images.extend_from_slice(&render_class(class, &mut rng));
        labels.push(class);
    }

    // stratified split: shuffle within each class, first 80% to train
    let mut split_rng = ChaCha8Rng::seed_from_u64(phase_seed(seed, "split"));
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for class in 0..CLASSES {
        let mut members: Vec<usize> = (0..n).filter(|i| i % CLASSES == class).collect();
        use rand::seq::SliceRandom;
        members.shuffle(&mut split_rng);
        let cut = members.len() * 4 / 5;
        train_idx.extend_from_slice(&members[..cut]);
        test_idx.extend_from_slice(&members[cut..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    Ok(SyntheticDataset {
        images,
        labels,
        n,
        seed,
        train_idx,
        test_idx,
    })
}

fn render_class(class: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    // moderate contrast: separable on clean pixels, breakable by the
    // corruption suite's noise levels
    let fg = rng.gen_range(0.68..0.84);
    let bg = rng.gen_range(0.16..0.32);
    let offset = rng.gen_range(-2i32..=2);
    let jitter_cx = rng.gen_range(-1i32..=1);
    let jitter_cy = rng.gen_range(-1i32..=1);
    let mut img = vec![0.0; SIDE * SIDE];
    for r in 0..SIDE {
        for c in 0..SIDE {
            let (ri, ci) = (r as i32, c as i32);
            let mid = (SIDE as i32 - 1) as f64 / 2.0;
            let value = match class {
                // bars at four orientations
                0 => bar(ri as f64 - mid - offset as f64, fg, bg),
                1 => bar(ci as f64 - mid - offset as f64, fg, bg),
                2 => bar((ri - ci - offset) as f64 / std::f64::consts::SQRT_2, fg, bg),
                3 => bar(
                    (ri + ci - (SIDE as i32 - 1) - offset) as f64 / std::f64::consts::SQRT_2,
                    fg,
                    bg,
                ),
                // checkerboard phases (4px cells)
                4 | 5 => {
                    let cell = (r / 4 + c / 4 + (class - 4)) % 2;
                    if cell == 0 {
                        fg
                    } else {
                        bg
                    }
                }
                // radial gradient polarities
                6 | 7 => {
                    let dx = ci as f64 - (mid + jitter_cx as f64);
                    let dy = ri as f64 - (mid + jitter_cy as f64);
                    let dist = (dx * dx + dy * dy).sqrt() / (mid * std::f64::consts::SQRT_2);
                    let ramp = dist.min(1.0);
                    if class == 6 {
                        fg - (fg - bg) * ramp
                    } else {
                        bg + (fg - bg) * ramp
                    }
                }
                _ => unreachable!("class index"),
            };
            let noise = rng.gen_range(-0.06..0.06);
            img[r * SIDE + c] = (value + noise).clamp(0.0, 1.0);
        }
    }
    img
}

fn bar(dist: f64, fg: f64, bg: f64) -> f64 {
    if dist.abs() <= 1.6 {
        fg
    } else {
        bg
    }
}

// ── Corruptions ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    BoxBlur,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 5] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::BoxBlur,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];
}

impl fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::BoxBlur => "box_blur",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        };
        write!(f, "{s}")
    }
}

impl FromStr for CorruptionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian_noise" => Ok(CorruptionKind::GaussianNoise),
            "shot_noise" => Ok(CorruptionKind::ShotNoise),
            "box_blur" => Ok(CorruptionKind::BoxBlur),
            "contrast" => Ok(CorruptionKind::Contrast),
            "pixelate" => Ok(CorruptionKind::Pixelate),
            other => Err(Error::UnknownCorruption(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    /// 0..=5; 0 is the identity.
    pub severity: u8,
    pub seed: u64,
}

const GAUSSIAN_SIGMA: [f64; 6] = [0.0, 0.05, 0.1, 0.2, 0.3, 0.4];
const SHOT_LAMBDA: [f64; 6] = [f64::INFINITY, 60.0, 25.0, 12.0, 5.0, 3.0];
const BLUR_KERNEL: [usize; 6] = [1, 1, 3, 3, 5, 5];
const CONTRAST_FACTOR: [f64; 6] = [1.0, 0.8, 0.6, 0.4, 0.3, 0.2];
const PIXELATE_FACTOR: [usize; 6] = [1, 1, 2, 2, 4, 4];

/// Apply a corruption to `n` images of SIDE×SIDE pixels. Severity 0 returns
/// the input unchanged. Outputs are clipped to [0,1]. Deterministic per seed.
pub fn corrupt(images: &[f64], n: usize, spec: &CorruptionSpec) -> Result<Vec<f64>> {
    let px = SIDE * SIDE;
    if images.len() != n * px {
        return Err(Error::DataLength {
            shape: vec![n, px],
            len: images.len(),
        });
    }
    if spec.severity > 5 {
        return Err(Error::InvalidArgument(format!(
            "severity {} outside 0..=5",
            spec.severity
        )));
    }
    if spec.severity == 0 {
        return Ok(images.to_vec());
    }
    let s = spec.severity as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(phase_seed(spec.seed, "corrupt"));
    let mut out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let normal = Normal::new(0.0, GAUSSIAN_SIGMA[s]).expect("valid sigma");
            images.iter().map(|&x| x + normal.sample(&mut rng)).collect()
        }
        CorruptionKind::ShotNoise => {
            let lambda = SHOT_LAMBDA[s];
            images
                .iter()
                .map(|&x| {
                    let mean = (x * lambda).max(0.0);
                    if mean == 0.0 {
                        0.0
                    } else {
                        let poisson = Poisson::new(mean).expect("positive mean");
                        poisson.sample(&mut rng) / lambda
                    }
                })
                .collect()
        }
        CorruptionKind::BoxBlur => {
            let k = BLUR_KERNEL[s];
            if k == 1 {
                images.to_vec()
            } else {
                box_blur(images, n, k)
            }
        }
        CorruptionKind::Contrast => {
            let f = CONTRAST_FACTOR[s];
            let mut out = Vec::with_capacity(images.len());
            for img in images.chunks(px) {
                let mean: f64 = img.iter().sum::<f64>() / px as f64;
                out.extend(img.iter().map(|&x| mean + f * (x - mean)));
            }
            out
        }
        CorruptionKind::Pixelate => {
            let f = PIXELATE_FACTOR[s];
            if f == 1 {
                images.to_vec()
            } else {
                pixelate(images, n, f)
            }
        }
    };
    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(out)
}

/// k×k mean filter with clamp-to-edge boundary handling.
fn box_blur(images: &[f64], n: usize, k: usize) -> Vec<f64> {
    let px = SIDE * SIDE;
    let half = (k / 2) as i32;
    let side = SIDE as i32;
    let mut out = vec![0.0; images.len()];
    for img in 0..n {
        let base = img * px;
        for r in 0..side {
            for c in 0..side {
                let mut acc = 0.0;
                for dr in -half..=half {
                    for dc in -half..=half {
                        let rr = (r + dr).clamp(0, side - 1) as usize;
                        let cc = (c + dc).clamp(0, side - 1) as usize;
                        acc += images[base + rr * SIDE + cc];
                    }
                }
                out[base + (r * side + c) as usize] = acc / (k * k) as f64;
            }
        }
    }
    out
}

/// Average-pool f×f blocks, then nearest-neighbor upsample back.
fn pixelate(images: &[f64], n: usize, f: usize) -> Vec<f64> {
    let px = SIDE * SIDE;
    let blocks = SIDE / f;
    let mut out = vec![0.0; images.len()];
    for img in 0..n {
        let base = img * px;
        for br in 0..blocks {
            for bc in 0..blocks {
                let mut acc = 0.0;
                for dr in 0..f {
                    for dc in 0..f {
                        acc += images[base + (br * f + dr) * SIDE + bc * f + dc];
                    }
                }
                let mean = acc / (f * f) as f64;
                for dr in 0..f {
                    for dc in 0..f {
                        out[base + (br * f + dr) * SIDE + bc * f + dc] = mean;
                    }
                }
            }
        }
    }
    out
}
