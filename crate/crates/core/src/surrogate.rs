//! Surrogate moments of layer pre-activations.
//!
//! Weights are modelled as i.i.d. normal with the empirical mean and variance
//! of the trained tensor (or of each output-channel slice). Under that model a
//! linear output has mean `mu * sum(x)` and variance `var * sum(x^2)`; a conv
//! output at position (i, j) of channel v has the same form over its input
//! window. Position estimates are pooled per tensor or per channel, turned into
//! an interval `[mean - alpha * std, mean + beta * std]`, and `(alpha, beta)`
//! are calibrated once so the interval covers a target fraction of the real
//! pre-activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Window2d;
use crate::quant::Granularity;
use crate::tensor::{stats_of, Tensor};

/// Empirical weight moments, one pair per tensor or per output channel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStats {
    pub mode: Granularity,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl WeightStats {
    pub fn new(mode: Granularity, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if mean.is_empty() || mean.len() != var.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} means for {} variances",
                mean.len(),
                var.len()
            )));
        }
        if mode == Granularity::PerTensor && mean.len() != 1 {
            return Err(Error::ShapeMismatch("per-tensor stats hold one pair".into()));
        }
        if var.iter().any(|&v| v.is_nan() || v < 0.0) || mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::InvalidConfig("weight variance must be finite and >= 0".into()));
        }
        Ok(WeightStats { mode, mean, var })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fits weight moments over the whole tensor or each axis-0 slice.
pub fn fit_weight_stats(w: &Tensor, mode: Granularity) -> Result<WeightStats> {
    if w.is_empty() {
        return Err(Error::Empty("weight tensor"));
    }
    match mode {
        Granularity::PerTensor => {
            let st = w.elementwise_stats()?;
            WeightStats::new(mode, vec![st.mean], vec![st.var])
        }
        Granularity::PerChannel => {
            let (channels, _) = w.shape().channel_blocks();
            let mut mean = Vec::with_capacity(channels);
            let mut var = Vec::with_capacity(channels);
            for c in 0..channels {
                let st = stats_of(w.channel(c))?;
                mean.push(st.mean);
                var.push(st.var);
            }
            WeightStats::new(mode, mean, var)
        }
    }
}

/// Mean and variance of a pre-activation (or of a pooled group of them).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentEstimate {
    pub mean: f64,
    pub var: f64,
}

impl MomentEstimate {
    pub fn std(&self) -> f64 {
        self.var.sqrt()
    }
}

/// Bias-free moments of one linear output from the input vector.
pub fn estimate_linear(x: &Tensor, ws: &WeightStats) -> Result<MomentEstimate> {
    if ws.mode != Granularity::PerTensor {
        return Err(Error::InvalidConfig(
            "linear estimator takes per-tensor weight stats".into(),
        ));
    }
    if x.shape().rank() != 1 {
        return Err(Error::ShapeMismatch(format!("linear input must be a vector, got {}", x.shape())));
    }
    let (s1, s2) = x.data().iter().fold((0.0, 0.0), |(a, b), &v| (a + v, b + v * v));
    Ok(MomentEstimate { mean: ws.mean[0] * s1, var: ws.var[0] * s2 })
}

/// Sampling stride of the conv estimator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StrideConfig {
    gamma: f64,
}

impl StrideConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidConfig(format!("sampling stride {gamma} must be > 0")));
        }
        Ok(StrideConfig { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Lattice spacing: non-integer strides round up.
    pub fn spacing(&self) -> usize {
        self.gamma.ceil() as usize
    }

    /// The stride limited to `max(h, w)`; the flag reports whether it changed.
    pub fn clamped_to(&self, h: usize, w: usize) -> (StrideConfig, bool) {
        let limit = h.max(w) as f64;
        if self.gamma > limit {
            (StrideConfig { gamma: limit }, true)
        } else {
            (*self, false)
        }
    }
}

impl Default for StrideConfig {
    fn default() -> Self {
        StrideConfig { gamma: 1.0 }
    }
}

/// Sampled output positions `0, g, 2g, ...` below `n`.
pub fn lattice(n: usize, spacing: usize) -> impl Iterator<Item = usize> + Clone {
    (0..n).step_by(spacing.max(1))
}

/// Per-position, per-channel moment estimates before pooling.
///
/// `mean` and `var` are laid out channel-major: entry `v * positions + k`.
/// A single channel stands for every output channel (per-tensor weight stats
/// without bias).
#[derive(Clone, Debug, PartialEq)]
pub struct PositionEstimates {
    pub channels: usize,
    pub positions: Vec<(usize, usize)>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Multiply-accumulates spent on window sums.
    pub macs: u64,
}

impl PositionEstimates {
    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn channel(&self, v: usize) -> impl Iterator<Item = MomentEstimate> + '_ {
        let p = self.positions.len();
        (v * p..(v + 1) * p).map(move |i| MomentEstimate { mean: self.mean[i], var: self.var[i] })
    }

    /// Shifts every position mean of channel `v` by `bias[v]`, expanding a
    /// shared channel to one per bias entry.
    pub fn with_bias(mut self, bias: &[f64]) -> Result<Self> {
        if self.channels == 1 && bias.len() > 1 {
            let p = self.positions.len();
            let (m, v) = (self.mean.clone(), self.var.clone());
            self.mean = bias.iter().flat_map(|b| m.iter().map(move |x| x + b)).collect();
            self.var = (0..bias.len()).flat_map(|_| v.iter().copied()).collect();
            self.channels = bias.len();
            debug_assert_eq!(self.mean.len(), p * bias.len());
            return Ok(self);
        }
        if bias.len() != self.channels {
            return Err(Error::ShapeMismatch(format!(
                "{} bias entries for {} estimate channels",
                bias.len(),
                self.channels
            )));
        }
        let p = self.positions.len();
        for (v, b) in bias.iter().enumerate() {
            for m in &mut self.mean[v * p..(v + 1) * p] {
                *m += b;
            }
        }
        Ok(self)
    }
}

/// Linear-layer estimates: one shared entry, or one per output when a bias is
/// present.
pub fn estimate_linear_outputs(
    x: &Tensor,
    ws: &WeightStats,
    bias: Option<&[f64]>,
) -> Result<PositionEstimates> {
    let est = estimate_linear(x, ws)?;
    let base = PositionEstimates {
        channels: 1,
        positions: vec![(0, 0)],
        mean: vec![est.mean],
        var: vec![est.var],
        macs: 2 * x.len() as u64,
    };
    match bias {
        Some(b) => base.with_bias(b),
        None => Ok(base),
    }
}

/// Conv estimates at lattice positions of the output.
///
/// `x` is CHW (or NCHW with N = 1). Padded taps contribute nothing.
pub fn estimate_conv(
    x: &Tensor,
    ws: &WeightStats,
    window: &Window2d,
    gamma: &StrideConfig,
) -> Result<PositionEstimates> {
    let (c, h, w) = chw(x)?;
    let (oh, ow) = window.output_hw(h, w)?;
    if gamma.gamma() > oh.max(ow) as f64 {
        return Err(Error::InvalidConfig(format!(
            "sampling stride {} exceeds output resolution {oh}x{ow}",
            gamma.gamma()
        )));
    }
    let g = gamma.spacing();
    let data = x.data();
    let mut positions = Vec::new();
    let mut s1 = Vec::new();
    let mut s2 = Vec::new();
    let mut macs = 0u64;
    for i in lattice(oh, g) {
        let rows = window.taps_in_bounds(0, i, h);
        for j in lattice(ow, g) {
            let cols = window.taps_in_bounds(1, j, w);
            let (mut a, mut b) = (0.0, 0.0);
            for r in 0..c {
                for q in rows.clone() {
                    let row = (r * h + window.input_index(0, i, q)) * w;
                    for t in cols.clone() {
                        let v = data[row + window.input_index(1, j, t)];
                        a += v;
                        b += v * v;
                        macs += 2;
                    }
                }
            }
            positions.push((i, j));
            s1.push(a);
            s2.push(b);
        }
    }
    let channels = ws.channels();
    let mut mean = Vec::with_capacity(channels * positions.len());
    let mut var = Vec::with_capacity(channels * positions.len());
    for v in 0..channels {
        mean.extend(s1.iter().map(|a| ws.mean[v] * a));
        var.extend(s2.iter().map(|b| ws.var[v] * b));
    }
    Ok(PositionEstimates { channels, positions, mean, var, macs })
}

pub(crate) fn chw(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [c, h, w] => Ok((c, h, w)),
        [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("expected CHW input, got {}", x.shape()))),
    }
}

/// How position variances are pooled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationRule {
    /// Mean over positions of `var + (mean - pooled_mean)^2`.
    #[default]
    TotalVariance,
    /// Unnormalized sum of `var^2 + (mean - pooled_mean)^2`.
    AsPrinted,
}

/// Pools position estimates into one estimate (per tensor) or one per channel.
pub fn aggregate(
    est: &PositionEstimates,
    granularity: Granularity,
    rule: AggregationRule,
) -> Result<Vec<MomentEstimate>> {
    if est.is_empty() {
        return Err(Error::Empty("estimate set"));
    }
    let pool = |items: &mut dyn Iterator<Item = MomentEstimate>| -> MomentEstimate {
        let items: Vec<MomentEstimate> = items.collect();
        let n = items.len() as f64;
        let mean = items.iter().map(|e| e.mean).sum::<f64>() / n;
        let var = match rule {
            AggregationRule::TotalVariance => {
                items.iter().map(|e| e.var + (e.mean - mean).powi(2)).sum::<f64>() / n
            }
            AggregationRule::AsPrinted => {
                items.iter().map(|e| e.var * e.var + (e.mean - mean).powi(2)).sum::<f64>()
            }
        };
        MomentEstimate { mean, var }
    };
    Ok(match granularity {
        Granularity::PerTensor => {
            let mut all = (0..est.channels).flat_map(|v| est.channel(v));
            vec![pool(&mut all)]
        }
        Granularity::PerChannel => (0..est.channels).map(|v| pool(&mut est.channel(v))).collect(),
    })
}

/// Interval widths in standard deviations below and above the mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntervalParams {
    pub alpha: f64,
    pub beta: f64,
}

impl IntervalParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha >= 0.0 && beta >= 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidConfig(format!("alpha {alpha}, beta {beta} must be >= 0")));
        }
        Ok(IntervalParams { alpha, beta })
    }
}

/// `[mean - alpha * std, mean + beta * std]`.
pub fn interval(est: &MomentEstimate, ip: &IntervalParams) -> (f64, f64) {
    let sd = est.var.max(0.0).sqrt();
    (est.mean - ip.alpha * sd, est.mean + ip.beta * sd)
}

/// Fraction of values inside the closed interval `[lo, hi]`.
pub fn coverage(preacts: &[f64], lo: f64, hi: f64) -> Result<f64> {
    if preacts.is_empty() {
        return Err(Error::Empty("pre-activation list"));
    }
    let inside = preacts.iter().filter(|&&y| lo <= y && y <= hi).count();
    Ok(inside as f64 / preacts.len() as f64)
}

/// Step and upper end of the `(alpha, beta)` search grid.
pub const GRID_STEP: f64 = 0.25;
pub const GRID_MAX: f64 = 8.0;
pub const DEFAULT_COVERAGE: f64 = 0.999;

/// One calibration forward pass of one layer: the real pre-activations and
/// the pooled estimates that predicted them. With several estimates the
/// values split into equal contiguous blocks, one per estimate.
#[derive(Clone, Debug)]
pub struct CoverageSample {
    pub preacts: Vec<f64>,
    pub estimates: Vec<MomentEstimate>,
}

/// Result of the `(alpha, beta)` search.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CalibratedInterval {
    pub params: IntervalParams,
    /// Mean coverage over the calibration samples at `params`.
    pub coverage: f64,
    /// False when no grid point reached the target.
    pub reached: bool,
}

struct SortedGroup {
    values: Vec<f64>,
    est: MomentEstimate,
}

/// Smallest grid `(alpha, beta)` whose mean coverage over `samples` reaches
/// `target`. Candidates are ordered by `alpha + beta`, then `|alpha - beta|`,
/// then `alpha`. Falls back to the grid maximum with a warning.
pub fn calibrate_alpha_beta(samples: &[CoverageSample], target: f64) -> Result<CalibratedInterval> {
    if samples.is_empty() {
        return Err(Error::Empty("calibration samples"));
    }
    if !(target > 0.0 && target <= 1.0) {
        return Err(Error::InvalidConfig(format!("coverage target {target} outside (0, 1]")));
    }
    let mut prepared: Vec<(usize, Vec<SortedGroup>)> = Vec::with_capacity(samples.len());
    for s in samples {
        if s.preacts.is_empty() || s.estimates.is_empty() || s.preacts.len() % s.estimates.len() != 0 {
            return Err(Error::ShapeMismatch(format!(
                "{} pre-activations for {} estimates",
                s.preacts.len(),
                s.estimates.len()
            )));
        }
        let block = s.preacts.len() / s.estimates.len();
        let groups = s
            .estimates
            .iter()
            .enumerate()
            .map(|(g, est)| {
                let mut values = s.preacts[g * block..(g + 1) * block].to_vec();
                values.sort_by(f64::total_cmp);
                SortedGroup { values, est: *est }
            })
            .collect();
        prepared.push((s.preacts.len(), groups));
    }

    let mean_coverage = |ip: &IntervalParams| -> f64 {
        let total: f64 = prepared
            .iter()
            .map(|(n, groups)| {
                let inside: usize = groups
                    .iter()
                    .map(|g| {
                        let (lo, hi) = interval(&g.est, ip);
                        let below_hi = g.values.partition_point(|&y| y <= hi);
                        let below_lo = g.values.partition_point(|&y| y < lo);
                        below_hi.saturating_sub(below_lo)
                    })
                    .sum();
                inside as f64 / *n as f64
            })
            .sum();
        total / prepared.len() as f64
    };

    for ip in search_grid() {
        let cov = mean_coverage(&ip);
        if cov >= target {
            return Ok(CalibratedInterval { params: ip, coverage: cov, reached: true });
        }
    }
    let ip = IntervalParams { alpha: GRID_MAX, beta: GRID_MAX };
    let cov = mean_coverage(&ip);
    log::warn!("coverage target {target} not reached on the grid; using alpha = beta = {GRID_MAX} (coverage {cov:.6})");
    Ok(CalibratedInterval { params: ip, coverage: cov, reached: false })
}

/// Grid candidates in preference order.
pub fn search_grid() -> Vec<IntervalParams> {
    let steps = (GRID_MAX / GRID_STEP) as i32;
    let mut pairs: Vec<(i32, i32)> =
        (0..=steps).flat_map(|a| (0..=steps).map(move |b| (a, b))).collect();
    pairs.sort_by_key(|&(a, b)| (a + b, (a - b).abs(), a));
    pairs
        .into_iter()
        .map(|(a, b)| IntervalParams { alpha: a as f64 * GRID_STEP, beta: b as f64 * GRID_STEP })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn per_tensor(mu: f64, var: f64) -> WeightStats {
        WeightStats::new(Granularity::PerTensor, vec![mu], vec![var]).unwrap()
    }

    #[test]
    fn fit_examples() {
        let w = Tensor::from_dims(&[2, 2], vec![1.0; 4]).unwrap();
        let ws = fit_weight_stats(&w, Granularity::PerTensor).unwrap();
        assert_eq!((ws.mean[0], ws.var[0]), (1.0, 0.0));

        let w = Tensor::from_dims(&[2, 2], vec![0.0, 2.0, -1.0, 3.0]).unwrap();
        let ws = fit_weight_stats(&w, Granularity::PerTensor).unwrap();
        assert_eq!((ws.mean[0], ws.var[0]), (1.0, 2.5));
    }

    #[test]
    fn per_channel_fit_matches_slices() {
        let vals: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let w = Tensor::from_dims(&[2, 3, 2, 2], vals.clone()).unwrap();
        let ws = fit_weight_stats(&w, Granularity::PerChannel).unwrap();
        for c in 0..2 {
            let slice = Tensor::from_dims(&[12], vals[c * 12..(c + 1) * 12].to_vec()).unwrap();
            let one = fit_weight_stats(&slice, Granularity::PerTensor).unwrap();
            assert_eq!(ws.mean[c], one.mean[0]);
            assert_eq!(ws.var[c], one.var[0]);
        }
    }

    #[test]
    fn linear_examples() {
        let x = Tensor::from_dims(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let e = estimate_linear(&x, &per_tensor(0.5, 0.04)).unwrap();
        assert!((e.mean - 3.0).abs() < 1e-12);
        assert!((e.var - 0.56).abs() < 1e-12);

        let zero = Tensor::zeros(x.shape().clone());
        assert_eq!(estimate_linear(&zero, &per_tensor(0.5, 0.04)).unwrap(), MomentEstimate { mean: 0.0, var: 0.0 });
        assert_eq!(estimate_linear(&x, &per_tensor(0.5, 0.0)).unwrap().var, 0.0);

        let m = Tensor::from_dims(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(matches!(estimate_linear(&m, &per_tensor(0.5, 0.04)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn linear_matches_monte_carlo() {
        // Empirical moments of y = W x over random weight draws.
        let x = [1.0, 2.0, 3.0];
        let (mu, var) = (0.5f64, 0.04f64);
        let normal = Normal::new(mu, var.sqrt()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ys: Vec<f64> = (0..n)
            .map(|_| x.iter().map(|xi| normal.sample(&mut rng) * xi).sum())
            .collect();
        let m = ys.iter().sum::<f64>() / n as f64;
        let v = ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / n as f64;
        let est = estimate_linear(&Tensor::from_dims(&[3], x.to_vec()).unwrap(), &per_tensor(mu, var)).unwrap();
        let se_mean = (v / n as f64).sqrt();
        let se_var = v * (2.0 / (n as f64 - 1.0)).sqrt();
        assert!((m - est.mean).abs() < 3.0 * se_mean);
        assert!((v - est.var).abs() < 3.0 * se_var);
    }

    /// Window sums of x and x^2 by explicit zero padding, independent of the
    /// estimator's in-bounds tap logic.
    fn padded_window_sums(x: &Tensor, win: &Window2d) -> Vec<(f64, f64)> {
        let (c, h, w) = chw(x).unwrap();
        let (ph, pw) = (h + 2 * win.padding[0], w + 2 * win.padding[1]);
        let mut padded = vec![0.0; c * ph * pw];
        for r in 0..c {
            for i in 0..h {
                for j in 0..w {
                    padded[(r * ph + i + win.padding[0]) * pw + j + win.padding[1]] =
                        x.data()[(r * h + i) * w + j];
                }
            }
        }
        let (oh, ow) = win.output_hw(h, w).unwrap();
        let mut out = Vec::new();
        for i in 0..oh {
            for j in 0..ow {
                let (mut a, mut b) = (0.0, 0.0);
                for r in 0..c {
                    for q in 0..win.kernel[0] {
                        for t in 0..win.kernel[1] {
                            let v = padded[(r * ph + i * win.stride[0] + q) * pw + j * win.stride[1] + t];
                            a += v;
                            b += v * v;
                        }
                    }
                }
                out.push((a, b));
            }
        }
        out
    }

    #[test]
    fn conv_single_tap() {
        let x = Tensor::from_dims(&[1, 1, 1], vec![3.0]).unwrap();
        let e = estimate_conv(&x, &per_tensor(0.2, 0.5), &Window2d::square(1), &StrideConfig::default()).unwrap();
        assert_eq!(e.positions, vec![(0, 0)]);
        assert!((e.mean[0] - 0.6).abs() < 1e-15);
        assert!((e.var[0] - 4.5).abs() < 1e-15);
    }

    #[test]
    fn conv_three_by_three_ones() {
        let x = Tensor::from_dims(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let e = estimate_conv(&x, &per_tensor(0.1, 0.3), &Window2d::square(3), &StrideConfig::default()).unwrap();
        assert_eq!(e.positions.len(), 1);
        assert!((e.mean[0] - 0.9).abs() < 1e-15);
        assert!((e.var[0] - 2.7).abs() < 1e-15);
    }

    #[test]
    fn conv_stride_equal_to_resolution_samples_origin_only() {
        let x = Tensor::from_dims(&[2, 4, 4], vec![0.5; 32]).unwrap();
        let win = Window2d::square(3).with_padding(1);
        let e = estimate_conv(&x, &per_tensor(1.0, 1.0), &win, &StrideConfig::new(4.0).unwrap()).unwrap();
        assert_eq!(e.positions, vec![(0, 0)]);
        let too_big = estimate_conv(&x, &per_tensor(1.0, 1.0), &win, &StrideConfig::new(4.5).unwrap());
        assert!(too_big.is_err());
    }

    #[test]
    fn conv_kernel_larger_than_input_rejected() {
        let x = Tensor::from_dims(&[1, 2, 2], vec![0.0; 4]).unwrap();
        assert!(estimate_conv(&x, &per_tensor(1.0, 1.0), &Window2d::square(3), &StrideConfig::default()).is_err());
    }

    #[test]
    fn conv_matches_padded_oracle_with_padding_and_stride() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let vals: Vec<f64> = (0..2 * 6 * 5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_dims(&[2, 6, 5], vals).unwrap();
        let win = Window2d::new([3, 2], [2, 1], [1, 1]).unwrap();
        let ws = WeightStats::new(Granularity::PerChannel, vec![0.3, -0.2], vec![0.1, 0.4]).unwrap();
        let e = estimate_conv(&x, &ws, &win, &StrideConfig::default()).unwrap();
        let oracle = padded_window_sums(&x, &win);
        let p = e.positions.len();
        assert_eq!(p, oracle.len());
        for v in 0..2 {
            for (k, (a, b)) in oracle.iter().enumerate() {
                assert!((e.mean[v * p + k] - ws.mean[v] * a).abs() < 1e-12);
                assert!((e.var[v * p + k] - ws.var[v] * b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fractional_stride_rounds_up() {
        let x = Tensor::from_dims(&[1, 8, 8], vec![1.0; 64]).unwrap();
        let e = estimate_conv(&x, &per_tensor(1.0, 1.0), &Window2d::square(1), &StrideConfig::new(2.5).unwrap()).unwrap();
        let rows: Vec<usize> = e.positions.iter().filter(|p| p.1 == 0).map(|p| p.0).collect();
        assert_eq!(rows, vec![0, 3, 6]);
    }

    #[test]
    fn aggregate_examples() {
        let field = PositionEstimates {
            channels: 1,
            positions: vec![(0, 0), (0, 1), (1, 0)],
            mean: vec![2.0; 3],
            var: vec![0.5; 3],
            macs: 0,
        };
        let a = aggregate(&field, Granularity::PerTensor, AggregationRule::TotalVariance).unwrap();
        assert_eq!(a, vec![MomentEstimate { mean: 2.0, var: 0.5 }]);

        let two = PositionEstimates {
            channels: 1,
            positions: vec![(0, 0), (0, 1)],
            mean: vec![0.0, 2.0],
            var: vec![1.0, 1.0],
            macs: 0,
        };
        let a = aggregate(&two, Granularity::PerTensor, AggregationRule::TotalVariance).unwrap();
        assert_eq!(a, vec![MomentEstimate { mean: 1.0, var: 2.0 }]);
        let a = aggregate(&two, Granularity::PerTensor, AggregationRule::AsPrinted).unwrap();
        assert_eq!(a, vec![MomentEstimate { mean: 1.0, var: 4.0 }]);

        let one = PositionEstimates { channels: 1, positions: vec![(0, 0)], mean: vec![-3.0], var: vec![7.0], macs: 0 };
        let a = aggregate(&one, Granularity::PerChannel, AggregationRule::TotalVariance).unwrap();
        assert_eq!(a, vec![MomentEstimate { mean: -3.0, var: 7.0 }]);

        let empty = PositionEstimates { channels: 1, positions: vec![], mean: vec![], var: vec![], macs: 0 };
        assert!(aggregate(&empty, Granularity::PerTensor, AggregationRule::TotalVariance).is_err());
    }

    #[test]
    fn aggregate_per_channel_keeps_channels_apart() {
        let e = PositionEstimates {
            channels: 2,
            positions: vec![(0, 0), (0, 1)],
            mean: vec![1.0, 1.0, 5.0, 7.0],
            var: vec![0.0, 0.0, 1.0, 1.0],
            macs: 0,
        };
        let a = aggregate(&e, Granularity::PerChannel, AggregationRule::TotalVariance).unwrap();
        assert_eq!(a[0], MomentEstimate { mean: 1.0, var: 0.0 });
        assert_eq!(a[1], MomentEstimate { mean: 6.0, var: 2.0 });
    }

    #[test]
    fn bias_shifts_means_only() {
        let x = Tensor::from_dims(&[2], vec![1.0, -2.0]).unwrap();
        let e = estimate_linear_outputs(&x, &per_tensor(1.0, 2.0), Some(&[0.5, -0.5])).unwrap();
        assert_eq!(e.channels, 2);
        assert_eq!(e.mean, vec![-0.5, -1.5]);
        assert_eq!(e.var, vec![10.0, 10.0]);
        let a = aggregate(&e, Granularity::PerTensor, AggregationRule::TotalVariance).unwrap();
        assert_eq!(a[0], MomentEstimate { mean: -1.0, var: 10.25 });
    }

    #[test]
    fn interval_examples() {
        let e = MomentEstimate { mean: 3.0, var: 0.56 };
        let (lo, hi) = interval(&e, &IntervalParams { alpha: 2.0, beta: 3.0 });
        assert!((lo - (3.0 - 2.0 * 0.56f64.sqrt())).abs() < 1e-15);
        assert!((hi - (3.0 + 3.0 * 0.56f64.sqrt())).abs() < 1e-15);

        let flat = MomentEstimate { mean: 1.5, var: 0.0 };
        assert_eq!(interval(&flat, &IntervalParams { alpha: 4.0, beta: 1.0 }), (1.5, 1.5));

        let (lo, hi) = interval(&e, &IntervalParams { alpha: 1.25, beta: 1.25 });
        assert!(((e.mean - lo) - (hi - e.mean)).abs() < 1e-15);
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage(&[1.0, 2.0, 3.0], 0.0, 10.0).unwrap(), 1.0);
        assert!((coverage(&[1.0, 2.0, 3.0], 1.5, 2.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(coverage(&[5.0], 5.0, 5.0).unwrap(), 1.0);
        assert!(coverage(&[], 0.0, 1.0).is_err());
    }

    #[test]
    fn grid_order_prefers_small_symmetric() {
        let g = search_grid();
        assert_eq!(g.len(), 33 * 33);
        assert_eq!(g[0], IntervalParams { alpha: 0.0, beta: 0.0 });
        assert_eq!(g[1], IntervalParams { alpha: 0.0, beta: 0.25 });
        assert_eq!(g[3], IntervalParams { alpha: 0.25, beta: 0.25 });
    }

    fn gaussian_samples(n_samples: usize, per: usize, seed: u64) -> Vec<CoverageSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n_samples)
            .map(|_| {
                let mean = rng.random_range(-3.0..3.0);
                let sd: f64 = rng.random_range(0.5..2.0);
                let normal = Normal::new(mean, sd).unwrap();
                CoverageSample {
                    preacts: (0..per).map(|_| normal.sample(&mut rng)).collect(),
                    estimates: vec![MomentEstimate { mean, var: sd * sd }],
                }
            })
            .collect()
    }

    #[test]
    fn gaussian_calibration_lands_near_two() {
        let samples = gaussian_samples(10, 10_000, 3);
        let c = calibrate_alpha_beta(&samples, 0.954).unwrap();
        assert!(c.reached);
        assert!((c.params.alpha - 2.0).abs() <= GRID_STEP, "{:?}", c);
        assert!((c.params.beta - 2.0).abs() <= GRID_STEP, "{:?}", c);
        assert!(c.coverage >= 0.954);
    }

    #[test]
    fn full_target_covers_extremes() {
        let samples = gaussian_samples(4, 500, 9);
        let c = calibrate_alpha_beta(&samples, 1.0).unwrap();
        assert!(c.reached);
        for s in &samples {
            let (lo, hi) = interval(&s.estimates[0], &c.params);
            let st = stats_of(&s.preacts).unwrap();
            assert!(lo <= st.min && st.max <= hi);
        }
    }

    #[test]
    fn constant_preacts_need_zero_width() {
        let samples = vec![CoverageSample { preacts: vec![2.0; 8], estimates: vec![MomentEstimate { mean: 2.0, var: 0.0 }] }];
        let c = calibrate_alpha_beta(&samples, 1.0).unwrap();
        assert_eq!(c.params, IntervalParams { alpha: 0.0, beta: 0.0 });
    }

    #[test]
    fn unreachable_target_returns_grid_max() {
        let samples = vec![CoverageSample { preacts: vec![0.0, 100.0], estimates: vec![MomentEstimate { mean: 0.0, var: 1.0 }] }];
        let c = calibrate_alpha_beta(&samples, 1.0).unwrap();
        assert!(!c.reached);
        assert_eq!(c.params, IntervalParams { alpha: GRID_MAX, beta: GRID_MAX });
        assert_eq!(c.coverage, 0.5);
    }

    #[test]
    fn calibrated_interval_meets_target_on_its_samples() {
        for (seed, target) in [(1, 0.9), (2, 0.99), (3, 0.999)] {
            let samples = gaussian_samples(3, 2000, seed);
            let c = calibrate_alpha_beta(&samples, target).unwrap();
            let mean_cov: f64 = samples
                .iter()
                .map(|s| {
                    let (lo, hi) = interval(&s.estimates[0], &c.params);
                    coverage(&s.preacts, lo, hi).unwrap()
                })
                .sum::<f64>()
                / samples.len() as f64;
            assert!((mean_cov - c.coverage).abs() < 1e-12);
            assert!(mean_cov >= target);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn coverage_monotone_in_interval(vals in prop::collection::vec(-10f64..10.0, 1..50), lo in -5f64..0.0, hi in 0f64..5.0, grow in 0f64..3.0) {
                let a = coverage(&vals, lo, hi).unwrap();
                let b = coverage(&vals, lo - grow, hi + grow).unwrap();
                prop_assert!(b >= a);
            }

            #[test]
            fn linear_homogeneous(vals in prop::collection::vec(-5f64..5.0, 1..32), c in 0.1f64..20.0, mu in -1f64..1.0, var in 0f64..1.0) {
                let ws = WeightStats::new(Granularity::PerTensor, vec![mu], vec![var]).unwrap();
                let x = Tensor::from_dims(&[vals.len()], vals.clone()).unwrap();
                let cx = x.map(|v| c * v).unwrap();
                let a = estimate_linear(&x, &ws).unwrap();
                let b = estimate_linear(&cx, &ws).unwrap();
                prop_assert!((b.mean - c * a.mean).abs() <= 1e-9 * (1.0 + (c * a.mean).abs()));
                prop_assert!((b.var - c * c * a.var).abs() <= 1e-9 * (1.0 + c * c * a.var));
            }

            #[test]
            fn aggregate_constant_field_identity(m in -10f64..10.0, v in 0f64..10.0, n in 1usize..20) {
                let e = PositionEstimates { channels: 1, positions: vec![(0, 0); n], mean: vec![m; n], var: vec![v; n], macs: 0 };
                let a = aggregate(&e, Granularity::PerTensor, AggregationRule::TotalVariance).unwrap();
                prop_assert!((a[0].mean - m).abs() <= 1e-12 * (1.0 + m.abs()));
                prop_assert!((a[0].var - v).abs() <= 1e-12 * (1.0 + v));
            }
        }
    }
}
