//! A train-free desk experiment: ten classes of oriented gratings and a
//! small CNN whose weights are oriented Gabor filters, so no training run is
//! needed to get a usable classifier.
//!
//! Class `k` is a grating at angle `k * pi / CLASSES`. The conv layer holds
//! four filters per class (even and odd phase, both signs); after ReLU and
//! global average pooling the linear layer sums each class's four channels.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::geometry::Window2d;
use crate::nn::{Dataset, Layer, ModelGraph, PoolKind};
use crate::tensor::{Shape, Tensor};

pub const CLASSES: usize = 10;
pub const CHANNELS: usize = 3;
pub const SIZE: usize = 16;
pub const KERNEL: usize = 7;

/// Grating frequency in cycles per pixel.
const FREQ: f64 = 0.16;
const GABOR_SIGMA: f64 = 2.0;

/// Knobs of the synthetic image distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DeskImages {
    /// Uniform jitter of the grating angle, in radians.
    pub angle_jitter: f64,
    pub freq_jitter: f64,
    pub contrast: (f64, f64),
    pub noise_sigma: f64,
}

impl Default for DeskImages {
    fn default() -> Self {
        DeskImages { angle_jitter: 0.2, freq_jitter: 0.03, contrast: (0.15, 0.4), noise_sigma: 0.35 }
    }
}

fn class_angle(k: usize) -> f64 {
    k as f64 * PI / CLASSES as f64
}

/// The 3x16x16 classifier: conv(3 -> 40, 7x7), ReLU, 10x10 average pool,
/// flatten, linear(40 -> 10).
pub fn desk_model() -> Result<ModelGraph> {
    let c = KERNEL as f64 / 2.0 - 0.5;
    let mut kernels = Vec::with_capacity(4 * CLASSES * CHANNELS * KERNEL * KERNEL);
    for k in 0..CLASSES {
        let (s, co) = class_angle(k).sin_cos();
        for phase in [0.0, PI / 2.0, PI, 1.5 * PI] {
            let mut g: Vec<f64> = (0..KERNEL * KERNEL)
                .map(|idx| {
                    let (y, x) = ((idx / KERNEL) as f64 - c, (idx % KERNEL) as f64 - c);
                    let env = (-(x * x + y * y) / (2.0 * GABOR_SIGMA * GABOR_SIGMA)).exp();
                    env * (2.0 * PI * FREQ * (x * co + y * s) + phase).cos()
                })
                .collect();
            // Zero DC keeps uniform brightness out of the response.
            let dc = g.iter().sum::<f64>() / g.len() as f64;
            let norm = g.iter().map(|v| (v - dc).abs()).sum::<f64>();
            g.iter_mut().for_each(|v| *v = (*v - dc) / norm);
            for _ in 0..CHANNELS {
                kernels.extend(g.iter().map(|v| v / CHANNELS as f64));
            }
        }
    }
    let filters = 4 * CLASSES;
    let conv = Tensor::from_dims(&[filters, CHANNELS, KERNEL, KERNEL], kernels)?;
    let out = SIZE - KERNEL + 1;
    let head: Vec<f64> = (0..CLASSES)
        .flat_map(|k| (0..filters).map(move |f| if f / 4 == k { 1.0 } else { 0.0 }))
        .collect();
    let linear = Tensor::from_dims(&[CLASSES, filters], head)?;
    ModelGraph::new(
        Shape::new([CHANNELS, SIZE, SIZE])?,
        vec![
            Layer::conv2d(conv, None, Window2d::square(KERNEL))?,
            Layer::Relu,
            Layer::pool(PoolKind::Avg, Window2d::square(out).with_stride(out))?,
            Layer::Flatten,
            Layer::linear(linear, None)?,
        ],
    )
}

/// `n` images with labels cycling through the classes, values in `[0, 1]`.
pub fn desk_dataset(n: usize, seed: u64, cfg: &DeskImages) -> Result<Dataset> {
    let shape = Shape::new([CHANNELS, SIZE, SIZE])?;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut samples = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let label = i % CLASSES;
        let theta = class_angle(label) + rng.random_range(-cfg.angle_jitter..=cfg.angle_jitter);
        let f = FREQ + rng.random_range(-cfg.freq_jitter..=cfg.freq_jitter);
        let phase = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(cfg.contrast.0..=cfg.contrast.1);
        let base = rng.random_range(0.35..=0.65);
        let gains: [f64; CHANNELS] = std::array::from_fn(|_| rng.random_range(0.7..=1.0));
        let (s, co) = theta.sin_cos();
        let mut data = Vec::with_capacity(shape.numel());
        for g in gains {
            for y in 0..SIZE {
                for x in 0..SIZE {
                    let wave = (2.0 * PI * f * (x as f64 * co + y as f64 * s) + phase).cos();
                    let v = base + g * amp * wave + noise.sample(&mut rng);
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
        samples.push(Tensor::from_vec(shape.clone(), data)?);
        labels.push(label as u16);
    }
    Dataset::new(shape, samples, labels)
}
