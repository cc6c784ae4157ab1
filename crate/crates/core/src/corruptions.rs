//! Seeded image corruptions with five severity levels, used to build
//! out-of-domain evaluation sets.
//!
//! Severity tables are defined here; they are stand-ins chosen to be
//! monotone, not reference constants.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Dataset;
use crate::surrogate::chw;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    WhiteNoise,
    MotionBlur,
    Pixelate,
    ColorShift,
    Brightness,
    Contrast,
    QuantizeImage,
    Combination,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::WhiteNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::Pixelate,
        CorruptionKind::ColorShift,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::QuantizeImage,
        CorruptionKind::Combination,
    ];

    /// Kinds a combination draws from.
    pub const BASIC: [CorruptionKind; 7] = [
        CorruptionKind::WhiteNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::Pixelate,
        CorruptionKind::ColorShift,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::QuantizeImage,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::WhiteNoise => "white_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Pixelate => "pixelate",
            CorruptionKind::ColorShift => "color_shift",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::QuantizeImage => "quantize_image",
            CorruptionKind::Combination => "combination",
        }
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown corruption {s:?}")))
    }
}

impl std::fmt::Display for CorruptionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub const NOISE_SIGMA: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
pub const PIXELATE_FACTOR: [usize; 5] = [2, 3, 4, 6, 8];
pub const BRIGHTNESS_OFFSET: [f64; 5] = [0.1, 0.2, 0.3, 0.4, 0.5];
pub const CONTRAST_GAIN: [f64; 5] = [0.75, 0.6, 0.5, 0.4, 0.3];
pub const COLOR_JITTER: [f64; 5] = [0.02, 0.04, 0.08, 0.12, 0.18];
pub const BLUR_LENGTH: [usize; 5] = [3, 5, 7, 9, 11];
pub const IMAGE_LEVELS: [u32; 5] = [64, 32, 16, 8, 6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corruption {
    pub kind: CorruptionKind,
    severity: u8,
    pub seed: u64,
}

impl Corruption {
    pub fn new(kind: CorruptionKind, severity: u8, seed: u64) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidSeverity(severity));
        }
        Ok(Corruption { kind, severity, seed })
    }

    pub fn severity(&self) -> u8 {
        self.severity
    }

    fn level(&self) -> usize {
        self.severity as usize - 1
    }

    /// Kinds applied in order (several for a combination).
    pub fn components(&self) -> Vec<CorruptionKind> {
        if self.kind != CorruptionKind::Combination {
            return vec![self.kind];
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xC0_4B_1A_7E);
        let n = rng.random_range(2..=3);
        let mut kinds = CorruptionKind::BASIC.to_vec();
        kinds.shuffle(&mut rng);
        kinds.truncate(n);
        kinds
    }
}

/// Corrupts a CHW image with values in `[0, 1]`; the result is clipped to
/// `[0, 1]`.
pub fn apply(c: &Corruption, x: &Tensor) -> Result<Tensor> {
    let (ch, h, w) = chw(x)?;
    let mut data = x.data().to_vec();
    for (step, kind) in c.components().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(step as u64 * 0x9E37_79B9_7F4A_7C15));
        let s = c.level();
        match kind {
            CorruptionKind::WhiteNoise => {
                let normal = Normal::new(0.0, NOISE_SIGMA[s]).expect("positive sigma");
                for v in &mut data {
                    *v += normal.sample(&mut rng);
                }
            }
            CorruptionKind::MotionBlur => data = motion_blur(&data, ch, h, w, BLUR_LENGTH[s], rng.random_range(0.0..std::f64::consts::PI)),
            CorruptionKind::Pixelate => data = pixelate(&data, ch, h, w, PIXELATE_FACTOR[s]),
            CorruptionKind::ColorShift => {
                let j = COLOR_JITTER[s];
                for plane in data.chunks_mut(h * w) {
                    let gain = 1.0 + rng.random_range(-j..=j);
                    plane.iter_mut().for_each(|v| *v *= gain);
                }
            }
            CorruptionKind::Brightness => {
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                data.iter_mut().for_each(|v| *v += sign * BRIGHTNESS_OFFSET[s]);
            }
            CorruptionKind::Contrast => {
                let g = CONTRAST_GAIN[s];
                data.iter_mut().for_each(|v| *v = 0.5 + g * (*v - 0.5));
            }
            CorruptionKind::QuantizeImage => {
                let l = (IMAGE_LEVELS[s] - 1) as f64;
                data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) * l).round() / l);
            }
            CorruptionKind::Combination => unreachable!("components are basic kinds"),
        }
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    Tensor::from_vec(x.shape().clone(), data)
}

/// Averages along a centred line of `len` taps at angle `theta`; edges
/// replicate.
fn motion_blur(x: &[f64], c: usize, h: usize, w: usize, len: usize, theta: f64) -> Vec<f64> {
    let half = (len as f64 - 1.0) / 2.0;
    let taps: Vec<(isize, isize)> = (0..len)
        .map(|k| {
            let t = k as f64 - half;
            ((t * theta.sin()).round() as isize, (t * theta.cos()).round() as isize)
        })
        .collect();
    let mut out = vec![0.0; x.len()];
    for r in 0..c {
        for i in 0..h {
            for j in 0..w {
                let sum: f64 = taps
                    .iter()
                    .map(|&(di, dj)| {
                        let ii = (i as isize + di).clamp(0, h as isize - 1) as usize;
                        let jj = (j as isize + dj).clamp(0, w as isize - 1) as usize;
                        x[(r * h + ii) * w + jj]
                    })
                    .sum();
                out[(r * h + i) * w + j] = sum / len as f64;
            }
        }
    }
    out
}

/// Replaces each `f x f` block (partial at the edges) by its mean.
fn pixelate(x: &[f64], c: usize, h: usize, w: usize, f: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..c {
        for bi in (0..h).step_by(f) {
            for bj in (0..w).step_by(f) {
                let (ei, ej) = ((bi + f).min(h), (bj + f).min(w));
                let idx = |i: usize, j: usize| (r * h + i) * w + j;
                let n = ((ei - bi) * (ej - bj)) as f64;
                // Offsets from the first pixel keep constant blocks exact.
                let first = x[idx(bi, bj)];
                let spread = (bi..ei).flat_map(|i| (bj..ej).map(move |j| (i, j))).map(|(i, j)| x[idx(i, j)] - first);
                let mean = first + spread.sum::<f64>() / n;
                for i in bi..ei {
                    for j in bj..ej {
                        out[idx(i, j)] = mean;
                    }
                }
            }
        }
    }
    out
}

/// Uniform draw of kind (combination included) and severity.
pub fn sample_corruption(seed: u64) -> Corruption {
    sample_corruption_from(&CorruptionKind::ALL, seed).expect("non-empty kind list")
}

/// Uniform draw of a kind from `kinds` and a severity.
pub fn sample_corruption_from(kinds: &[CorruptionKind], seed: u64) -> Result<Corruption> {
    if kinds.is_empty() {
        return Err(Error::InvalidConfig("no corruption kinds to sample from".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = kinds[rng.random_range(0..kinds.len())];
    let severity = rng.random_range(1..=5);
    Corruption::new(kind, severity, rng.next_u64())
}

/// Corrupts every sample with its own draw from `kinds`.
pub fn corrupt_dataset(data: &Dataset, kinds: &[CorruptionKind], seed: u64) -> Result<Dataset> {
    data.map_samples(|i, x| {
        let c = sample_corruption_from(kinds, seed ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03))?;
        apply(&c, x)
    })
}
