//! Integer execution path: grid payloads, widened integer accumulators,
//! fixed-point requantization and a fixed-point surrogate estimator.
//!
//! Accumulators hold `sum((q_x - z_x)(q_w - z_w))`. When the input carries
//! one parameter set, that sum lives in a single b'-bit register whose unit is
//! `s_x * s_w`. With per-channel input parameters each input group has its own
//! b'-bit partial sum; partials are combined in a 128-bit register after
//! scaling by the group's input scale encoded as `mult_g * 2^-exp`.

use crate::error::{Error, Result};
use crate::nn::layer::Layer;
use crate::quant::{grid_max, grid_min, Granularity, ParamSet, QuantizedTensor};
use crate::surrogate::{lattice, IntervalParams, MomentEstimate, StrideConfig, WeightStats};

/// Splits a positive finite `x` into `f * 2^e` with `f` in `[0.5, 1)`.
fn frexp(x: f64) -> (f64, i32) {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let field = ((bits >> 52) & 0x7ff) as i32;
    if field == 0 {
        let (f, e) = frexp(x * 2f64.powi(64));
        return (f, e - 64);
    }
    let f = f64::from_bits((bits & !(0x7ff << 52)) | (1022 << 52));
    (f, field - 1022)
}

/// `v * 2^-n` rounded half to even; left shift when `n <= 0`.
pub fn shift_round(v: i128, n: i32) -> Result<i128> {
    if n <= 0 {
        let k = (-n) as u32;
        return if k >= 127 {
            if v == 0 { Ok(0) } else { Err(Error::AccumulatorOverflow(v)) }
        } else {
            v.checked_mul(1i128 << k).ok_or(Error::AccumulatorOverflow(v))
        };
    }
    if n >= 127 {
        return Ok(0);
    }
    let q = v >> n;
    let r = v - (q << n);
    let half = 1i128 << (n - 1);
    Ok(if r > half || (r == half && q & 1 == 1) { q + 1 } else { q })
}

/// Division rounded half to even; `d > 0`.
pub fn div_round(n: i128, d: i128) -> i128 {
    debug_assert!(d > 0);
    let q = n.div_euclid(d);
    let r2 = 2 * n.rem_euclid(d);
    if r2 > d || (r2 == d && q & 1 == 1) {
        q + 1
    } else {
        q
    }
}

/// Positive real `multiplier * 2^(shift - 31)` with `multiplier` in
/// `[2^30, 2^31)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FixedPointMultiplier {
    pub multiplier: i32,
    pub shift: i32,
}

impl FixedPointMultiplier {
    pub fn from_real(r: f64) -> Result<Self> {
        if !(r > 0.0 && r.is_finite()) {
            return Err(Error::InvalidConfig(format!("fixed-point multiplier for {r}")));
        }
        let (f, mut e) = frexp(r);
        let mut m = (f * 2f64.powi(31)).round_ties_even() as i64;
        if m == 1 << 31 {
            m >>= 1;
            e += 1;
        }
        Ok(FixedPointMultiplier { multiplier: m as i32, shift: e })
    }

    pub fn to_real(&self) -> f64 {
        self.multiplier as f64 * 2f64.powi(self.shift - 31)
    }

    /// `acc * r` rounded half to even; saturates far outside any grid.
    pub fn apply(&self, acc: i128) -> i128 {
        match acc.checked_mul(self.multiplier as i128) {
            Some(p) => shift_round(p, 31 - self.shift).unwrap_or(acc.signum() * (i128::MAX >> 1)),
            None => acc.signum() * (i128::MAX >> 1),
        }
    }
}

/// Scales a widened accumulator to the output grid.
pub fn requantize(acc: i128, fpm: &FixedPointMultiplier, z_out: i32, bits: u32) -> i32 {
    let v = fpm.apply(acc).saturating_add(z_out as i128);
    v.clamp(grid_min(bits) as i128, grid_max(bits) as i128) as i32
}

/// `floor(sqrt(n))` by integer Newton-Raphson.
pub fn isqrt(n: u64) -> u32 {
    isqrt_wide(n as u128) as u32
}

/// [`isqrt`] over 128-bit operands.
pub fn isqrt_wide(n: u128) -> u64 {
    if n < 2 {
        return n as u64;
    }
    let bits = 128 - n.leading_zeros();
    // 2^ceil(bits/2) >= sqrt(n), so iterates decrease monotonically.
    let mut x: u128 = 1 << bits.div_ceil(2);
    loop {
        let y = (x + n / x) / 2;
        if y >= x {
            break;
        }
        x = y;
    }
    while x.checked_mul(x).is_none_or(|sq| sq > n) {
        x -= 1;
    }
    x as u64
}

/// `mantissa * 2^exp`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dyadic {
    pub mantissa: i64,
    pub exp: i32,
}

/// Significant bits kept by [`Dyadic::from_real`].
pub const DYADIC_BITS: u32 = 24;

impl Dyadic {
    pub const ZERO: Dyadic = Dyadic { mantissa: 0, exp: 0 };

    pub fn from_real(x: f64) -> Result<Self> {
        if !x.is_finite() {
            return Err(Error::NonFinite);
        }
        if x == 0.0 {
            return Ok(Dyadic::ZERO);
        }
        let (f, mut e) = frexp(x.abs());
        let mut m = (f * 2f64.powi(DYADIC_BITS as i32)).round_ties_even() as i64;
        if m == 1 << DYADIC_BITS {
            m >>= 1;
            e += 1;
        }
        Ok(Dyadic { mantissa: m * x.signum() as i64, exp: e - DYADIC_BITS as i32 })
    }

    pub fn to_real(&self) -> f64 {
        self.mantissa as f64 * 2f64.powi(self.exp)
    }
}

/// Fractional bits of [`IntMoment::mean`]; variances carry twice as many.
pub const MOMENT_FRAC_BITS: i32 = 24;

/// Weight moments and bias in fixed point, prepared once per model.
#[derive(Clone, Debug, PartialEq)]
pub struct IntWeightStats {
    pub mode: Granularity,
    pub mean: Vec<Dyadic>,
    pub var: Vec<Dyadic>,
    /// Bias in units of `2^-MOMENT_FRAC_BITS`.
    pub bias: Option<Vec<i128>>,
}

impl IntWeightStats {
    pub fn new(ws: &WeightStats, bias: Option<&[f64]>) -> Result<Self> {
        let enc = |v: &[f64]| v.iter().map(|&x| Dyadic::from_real(x)).collect::<Result<Vec<_>>>();
        let bias = bias
            .map(|b| {
                b.iter()
                    .map(|&x| {
                        let q = (x * 2f64.powi(MOMENT_FRAC_BITS)).round_ties_even();
                        if q.is_finite() && q.abs() < 2f64.powi(100) {
                            Ok(q as i128)
                        } else {
                            Err(Error::InvalidConfig(format!("bias {x} out of fixed-point range")))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Ok(IntWeightStats { mode: ws.mode, mean: enc(&ws.mean)?, var: enc(&ws.var)?, bias })
    }

    fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fixed-point moments: mean in units of `2^-24`, variance in `2^-48`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IntMoment {
    pub mean: i128,
    pub var: i128,
}

impl IntMoment {
    /// Standard deviation in units of `2^-24`.
    pub fn std(&self) -> i128 {
        isqrt_wide(self.var.max(0) as u128) as i128
    }

    /// Interval endpoints in units of `2^-24` with `alpha`, `beta` in Q8.
    pub fn interval(&self, alpha_q8: u32, beta_q8: u32) -> (i128, i128) {
        let sd = self.std();
        (
            self.mean - div_round(alpha_q8 as i128 * sd, 256),
            self.mean + div_round(beta_q8 as i128 * sd, 256),
        )
    }

    /// Real interval for real-valued `(alpha, beta)` rounded to Q8.
    pub fn real_interval(&self, ip: &IntervalParams) -> (f64, f64) {
        let (lo, hi) = self.interval(to_q8(ip.alpha), to_q8(ip.beta));
        (from_fixed(lo, MOMENT_FRAC_BITS), from_fixed(hi, MOMENT_FRAC_BITS))
    }

    pub fn to_real(&self) -> MomentEstimate {
        MomentEstimate {
            mean: from_fixed(self.mean, MOMENT_FRAC_BITS),
            var: from_fixed(self.var, 2 * MOMENT_FRAC_BITS),
        }
    }
}

pub fn to_q8(x: f64) -> u32 {
    (x * 256.0).round_ties_even() as u32
}

fn from_fixed(v: i128, frac: i32) -> f64 {
    v as f64 * 2f64.powi(-frac)
}

/// Position estimates in fixed point, laid out like
/// [`crate::surrogate::PositionEstimates`].
#[derive(Clone, Debug, PartialEq)]
pub struct IntPositionEstimates {
    pub channels: usize,
    pub positions: Vec<(usize, usize)>,
    pub mean: Vec<i128>,
    pub var: Vec<i128>,
    pub macs: u64,
}

/// Per-group input scales as `mult_g * 2^-exp` with a shared exponent; the
/// largest scale gets `bits` significant bits.
fn common_scale(params: &ParamSet, bits: u32) -> (Vec<i128>, i32) {
    let scales: Vec<f64> = params.as_slice().iter().map(|p| p.scale).collect();
    let max = scales.iter().copied().fold(0.0, f64::max);
    let (_, e) = frexp(max);
    let exp = bits as i32 - e;
    let mults = scales.iter().map(|s| (s * 2f64.powi(exp)).round_ties_even() as i128).collect();
    (mults, exp)
}

/// Surrogate moments from the quantized input using integer window sums
/// `sum(q - z)` and `sum((q - z)^2)` and fixed-point weight moments.
///
/// `layer` supplies the geometry (conv window, or a linear layer's single
/// position). Sampled positions match the real-valued estimators.
pub fn estimate_moments_int(
    input: &QuantizedTensor,
    layer: &Layer,
    ws: &IntWeightStats,
    gamma: &StrideConfig,
) -> Result<IntPositionEstimates> {
    let (mults, exp) = common_scale(input.params(), DYADIC_BITS);
    let block = input.block();
    let q = input.data();
    let zp: Vec<i64> = input.params().as_slice().iter().map(|p| p.zero_point as i64).collect();

    // Window sums scaled to 2^-exp (first) and 2^-2exp (second moment).
    let mut s1: Vec<i128> = Vec::new();
    let mut s2: Vec<i128> = Vec::new();
    let mut positions = Vec::new();
    let mut macs = 0u64;
    let flush = |g: usize, a: i64, b: u64, acc1: &mut i128, acc2: &mut i128| -> Result<()> {
        *acc1 += mults[g] * a as i128;
        let m2 = mults[g] * mults[g];
        *acc2 = m2
            .checked_mul(b as i128)
            .and_then(|t| acc2.checked_add(t))
            .ok_or(Error::AccumulatorOverflow(b as i128))?;
        Ok(())
    };
    let out_channels = match layer {
        Layer::Linear { weight, .. } => {
            if input.shape().rank() != 1 || input.len() != weight.dims()[1] {
                return Err(Error::ShapeMismatch(format!(
                    "linear estimator expects a vector of {}, got {}",
                    weight.dims()[1],
                    input.shape()
                )));
            }
            let (mut acc1, mut acc2) = (0i128, 0i128);
            for (g, chunk) in q.chunks(block).enumerate() {
                let (mut a, mut b) = (0i64, 0u64);
                for &v in chunk {
                    let d = v as i64 - zp[g];
                    a += d;
                    b += (d * d) as u64;
                }
                flush(g, a, b, &mut acc1, &mut acc2)?;
            }
            macs += 2 * q.len() as u64;
            positions.push((0, 0));
            s1.push(acc1);
            s2.push(acc2);
            weight.dims()[0]
        }
        Layer::Conv2d { weight, window, .. } => {
            let (c, h, w) = match *input.shape().dims() {
                [c, h, w] | [1, c, h, w] => (c, h, w),
                _ => return Err(Error::ShapeMismatch(format!("expected CHW input, got {}", input.shape()))),
            };
            let (oh, ow) = window.output_hw(h, w)?;
            if gamma.gamma() > oh.max(ow) as f64 {
                return Err(Error::InvalidConfig(format!(
                    "sampling stride {} exceeds output resolution {oh}x{ow}",
                    gamma.gamma()
                )));
            }
            let group_of = |r: usize| (r * h * w) / block;
            for i in lattice(oh, gamma.spacing()) {
                let rows = window.taps_in_bounds(0, i, h);
                for j in lattice(ow, gamma.spacing()) {
                    let cols = window.taps_in_bounds(1, j, w);
                    let (mut acc1, mut acc2) = (0i128, 0i128);
                    let (mut a, mut b) = (0i64, 0u64);
                    for r in 0..c {
                        let g = group_of(r);
                        for qi in rows.clone() {
                            let row = (r * h + window.input_index(0, i, qi)) * w;
                            for t in cols.clone() {
                                let d = q[row + window.input_index(1, j, t)] as i64 - zp[g];
                                a += d;
                                b += (d * d) as u64;
                                macs += 2;
                            }
                        }
                        if r + 1 == c || group_of(r + 1) != g {
                            flush(g, a, b, &mut acc1, &mut acc2)?;
                            (a, b) = (0, 0);
                        }
                    }
                    positions.push((i, j));
                    s1.push(acc1);
                    s2.push(acc2);
                }
            }
            weight.dims()[0]
        }
        other => return Err(Error::InvalidConfig(format!("{} has no estimator", other.kind()))),
    };

    let channels = if ws.channels() > 1 || ws.bias.is_some() { out_channels } else { 1 };
    if ws.channels() != 1 && ws.channels() != out_channels {
        return Err(Error::ShapeMismatch(format!(
            "{} weight-stat channels for {out_channels} outputs",
            ws.channels()
        )));
    }
    let p = positions.len();
    let mut mean = Vec::with_capacity(channels * p);
    let mut var = Vec::with_capacity(channels * p);
    for v in 0..channels {
        let sv = if ws.channels() == 1 { 0 } else { v };
        let (mu, sg) = (ws.mean[sv], ws.var[sv]);
        let b = ws.bias.as_ref().map_or(0, |b| b[v]);
        for k in 0..p {
            let m = s1[k]
                .checked_mul(mu.mantissa as i128)
                .ok_or(Error::AccumulatorOverflow(s1[k]))?;
            mean.push(shift_round(m, -(mu.exp - exp + MOMENT_FRAC_BITS))? + b);
            let s = s2[k]
                .checked_mul(sg.mantissa as i128)
                .ok_or(Error::AccumulatorOverflow(s2[k]))?;
            var.push(shift_round(s, -(sg.exp - 2 * exp + 2 * MOMENT_FRAC_BITS))?.max(0));
        }
    }
    Ok(IntPositionEstimates { channels, positions, mean, var, macs })
}

/// Total-variance pooling in fixed point, per tensor or per channel.
pub fn aggregate_int(est: &IntPositionEstimates, granularity: Granularity) -> Result<Vec<IntMoment>> {
    if est.mean.is_empty() {
        return Err(Error::Empty("estimate set"));
    }
    let pool = |idx: std::ops::Range<usize>| -> IntMoment {
        let n = idx.len() as i128;
        let mean = div_round(est.mean[idx.clone()].iter().sum(), n);
        let spread: i128 = idx
            .clone()
            .map(|i| est.var[i] + (est.mean[i] - mean) * (est.mean[i] - mean))
            .sum();
        IntMoment { mean, var: div_round(spread, n) }
    };
    let p = est.positions.len();
    Ok(match granularity {
        Granularity::PerTensor => vec![pool(0..est.mean.len())],
        Granularity::PerChannel => (0..est.channels).map(|v| pool(v * p..(v + 1) * p)).collect(),
    })
}

/// Integer evaluation of one conv or linear layer over a quantized input.
pub struct IntWeighted<'a> {
    layer: &'a Layer,
    input: &'a QuantizedTensor,
    weights: &'a QuantizedTensor,
    in_dims: [usize; 3],
    out_hw: (usize, usize),
    out_len: usize,
    mults: Vec<i128>,
    /// Real value of one combined accumulator step, before the weight scale.
    in_unit: f64,
    bias: Option<Vec<i128>>,
    cast_bits: u32,
}

impl<'a> IntWeighted<'a> {
    pub fn new(
        layer: &'a Layer,
        input: &'a QuantizedTensor,
        weights: &'a QuantizedTensor,
        cast_bits: u32,
    ) -> Result<Self> {
        if !(2..=64).contains(&cast_bits) {
            return Err(Error::InvalidConfig(format!("cast width {cast_bits} outside [2, 64]")));
        }
        let out_shape = layer.output_shape(input.shape())?;
        let w = layer
            .weight()
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no weights", layer.kind())))?;
        if weights.shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!(
                "quantized weights {} for layer weights {}",
                weights.shape(),
                w.shape()
            )));
        }
        let (in_dims, out_hw) = match layer {
            Layer::Conv2d { window, .. } => {
                let (c, h, wd) = match *input.shape().dims() {
                    [c, h, wd] => (c, h, wd),
                    _ => unreachable!("output_shape checked CHW"),
                };
                ([c, h, wd], window.output_hw(h, wd)?)
            }
            _ => ([input.len(), 1, 1], (1, 1)),
        };
        let (mults, in_unit) = if input.params().groups() == 1 {
            (vec![1], input.params().group(0).scale)
        } else {
            let (m, e) = common_scale(input.params(), 31);
            (m, 2f64.powi(-e))
        };
        let mut this = IntWeighted {
            layer,
            input,
            weights,
            in_dims,
            out_hw,
            out_len: out_shape.numel(),
            mults,
            in_unit,
            bias: None,
            cast_bits,
        };
        this.bias = layer
            .bias()
            .map(|b| {
                b.iter()
                    .enumerate()
                    .map(|(v, &x)| {
                        let q = (x / this.unit(v)).round_ties_even();
                        if q.is_finite() && q.abs() < 2f64.powi(120) {
                            Ok(q as i128)
                        } else {
                            Err(Error::AccumulatorOverflow(i128::MAX))
                        }
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        Ok(this)
    }

    pub fn len(&self) -> usize {
        self.out_len
    }

    pub fn is_empty(&self) -> bool {
        self.out_len == 0
    }

    pub fn channel_of(&self, o: usize) -> usize {
        o / (self.out_hw.0 * self.out_hw.1)
    }

    fn weight_params(&self, v: usize) -> &crate::quant::QuantParams {
        self.weights.params().group(v * self.layer.fan_in() / self.weights.block())
    }

    /// Real value of one accumulator step for output channel `v`.
    pub fn unit(&self, v: usize) -> f64 {
        self.in_unit * self.weight_params(v).scale
    }

    /// Real value of accumulator `acc` at output `o`.
    pub fn real(&self, o: usize, acc: i128) -> f64 {
        acc as f64 * self.unit(self.channel_of(o))
    }

    fn fits(&self, v: i128) -> bool {
        let half = 1i128 << (self.cast_bits - 1);
        -half <= v && v < half
    }

    /// Widened accumulator (bias included) of output element `o`.
    pub fn acc(&self, o: usize) -> Result<i128> {
        let v = self.channel_of(o);
        let zw = self.weight_params(v).zero_point as i64;
        let x = self.input.data();
        let wq = self.weights.data();
        let in_block = self.input.block();
        let zx = |g: usize| self.input.params().group(g).zero_point as i64;
        let bias = self.bias.as_ref().map_or(0, |b| b[v]);
        let uniform = self.mults.len() == 1;
        let mut combined: i128 = 0;
        let mut part: i64 = 0;
        let mut flush = |g: usize, part: i64, extra: i128| -> Result<()> {
            let p = part as i128 + extra;
            if !self.fits(p) {
                return Err(Error::AccumulatorOverflow(p));
            }
            combined += self.mults[g] * p;
            Ok(())
        };
        match self.layer {
            Layer::Linear { .. } => {
                let d = self.in_dims[0];
                let row = &wq[v * d..(v + 1) * d];
                for (g, (xs, ws)) in x.chunks(in_block).zip(row.chunks(in_block)).enumerate() {
                    let z = zx(g);
                    part = xs.iter().zip(ws).map(|(&a, &b)| (a as i64 - z) * (b as i64 - zw)).sum();
                    let last = (g + 1) * in_block >= d;
                    flush(g, part, if uniform && last { bias } else { 0 })?;
                }
            }
            Layer::Conv2d { window, .. } => {
                let [c, h, w] = self.in_dims;
                let (kh, kw) = (window.kernel[0], window.kernel[1]);
                let rem = o % (self.out_hw.0 * self.out_hw.1);
                let (i, j) = (rem / self.out_hw.1, rem % self.out_hw.1);
                let rows = window.taps_in_bounds(0, i, h);
                let cols = window.taps_in_bounds(1, j, w);
                let group_of = |r: usize| (r * h * w) / in_block;
                for r in 0..c {
                    let g = group_of(r);
                    let z = zx(g);
                    for qi in rows.clone() {
                        let xrow = (r * h + window.input_index(0, i, qi)) * w;
                        let wrow = (((v * c + r) * kh) + qi) * kw;
                        for t in cols.clone() {
                            part += (x[xrow + window.input_index(1, j, t)] as i64 - z) * (wq[wrow + t] as i64 - zw);
                        }
                    }
                    if r + 1 == c || group_of(r + 1) != g {
                        flush(g, part, if uniform && r + 1 == c { bias } else { 0 })?;
                        part = 0;
                    }
                }
            }
            _ => unreachable!("checked in IntWeighted::new"),
        }
        Ok(if uniform { combined } else { combined + bias })
    }

    /// Accumulators of every output element (the widened output).
    pub fn widen_all(&self) -> Result<Vec<i128>> {
        (0..self.out_len).map(|o| self.acc(o)).collect()
    }

    /// Requantizer for output channel `v` into output group `g`.
    pub fn multiplier(&self, v: usize, out: &ParamSet, g: usize) -> Result<FixedPointMultiplier> {
        FixedPointMultiplier::from_real(self.unit(v) / out.group(g).scale)
    }

    fn out_block(&self, out: &ParamSet) -> Result<usize> {
        let per_channel = self.out_hw.0 * self.out_hw.1;
        if !self.out_len.is_multiple_of(out.groups()) || !(self.out_len / out.groups()).is_multiple_of(per_channel) {
            return Err(Error::ShapeMismatch(format!(
                "{} output groups for {} outputs",
                out.groups(),
                self.out_len
            )));
        }
        Ok(self.out_len / out.groups())
    }

    /// Requantizes one element at a time, never holding more than one
    /// accumulator.
    pub fn run(&self, out: &ParamSet) -> Result<Vec<i32>> {
        self.run_observed(out, |_, _| {})
    }

    /// [`IntWeighted::run`], passing each element's real value to `observe`.
    pub fn run_observed(&self, out: &ParamSet, mut observe: impl FnMut(usize, f64)) -> Result<Vec<i32>> {
        let block = self.out_block(out)?;
        let mut cache: Option<(usize, usize, FixedPointMultiplier)> = None;
        (0..self.out_len)
            .map(|o| {
                let (v, g) = (self.channel_of(o), o / block);
                let fpm = match cache {
                    Some((cv, cg, f)) if cv == v && cg == g => f,
                    _ => {
                        let f = self.multiplier(v, out, g)?;
                        cache = Some((v, g, f));
                        f
                    }
                };
                let acc = self.acc(o)?;
                observe(o, self.real(o, acc));
                Ok(requantize(acc, &fpm, out.group(g).zero_point, out.bits()))
            })
            .collect()
    }

    /// Requantizes precomputed accumulators.
    pub fn requantize_all(&self, accs: &[i128], out: &ParamSet) -> Result<Vec<i32>> {
        let block = self.out_block(out)?;
        accs.iter()
            .enumerate()
            .map(|(o, &acc)| {
                let (v, g) = (self.channel_of(o), o / block);
                Ok(requantize(acc, &self.multiplier(v, out, g)?, out.group(g).zero_point, out.bits()))
            })
            .collect()
    }
}

fn run_kernel(
    layer: &Layer,
    input: &QuantizedTensor,
    weights: &QuantizedTensor,
    out: &ParamSet,
    cast_bits: u32,
) -> Result<QuantizedTensor> {
    let k = IntWeighted::new(layer, input, weights, cast_bits)?;
    let shape = layer.output_shape(input.shape())?;
    QuantizedTensor::new(shape, k.run(out)?, out.clone())
}

/// Quantized convolution; the layer's real bias is converted to accumulator
/// units of the given input and weight scales.
pub fn conv2d_s8(
    layer: &Layer,
    input: &QuantizedTensor,
    weights: &QuantizedTensor,
    out: &ParamSet,
    cast_bits: u32,
) -> Result<QuantizedTensor> {
    if !matches!(layer, Layer::Conv2d { .. }) {
        return Err(Error::InvalidConfig(format!("conv2d_s8 on {}", layer.kind())));
    }
    run_kernel(layer, input, weights, out, cast_bits)
}

/// Quantized fully connected layer.
pub fn linear_s8(
    layer: &Layer,
    input: &QuantizedTensor,
    weights: &QuantizedTensor,
    out: &ParamSet,
    cast_bits: u32,
) -> Result<QuantizedTensor> {
    if !matches!(layer, Layer::Linear { .. }) {
        return Err(Error::InvalidConfig(format!("linear_s8 on {}", layer.kind())));
    }
    run_kernel(layer, input, weights, out, cast_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize, quantize_tensor, QuantParams};
    use crate::surrogate::{aggregate, estimate_linear_outputs, fit_weight_stats, AggregationRule};
    use crate::geometry::Window2d;
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn isqrt_examples() {
        assert_eq!(isqrt(0), 0);
        assert_eq!(isqrt(16), 4);
        assert_eq!(isqrt(1_000_001), 1000);
        assert_eq!(isqrt(u64::MAX), u32::MAX);
        assert_eq!(isqrt_wide(u128::MAX), u64::MAX);
    }

    #[test]
    fn multiplier_encoding() {
        let f = FixedPointMultiplier::from_real(1.0).unwrap();
        assert_eq!((f.multiplier, f.shift), (1 << 30, 1));
        for r in [1e-9, 0.00390625, 0.3, 1.0, 7.5, 1e6] {
            let f = FixedPointMultiplier::from_real(r).unwrap();
            assert!((1 << 30..=i32::MAX).contains(&f.multiplier));
            assert!(((f.to_real() - r) / r).abs() <= 2f64.powi(-30));
        }
        assert!(FixedPointMultiplier::from_real(0.0).is_err());
    }

    #[test]
    fn requantize_examples() {
        let one = FixedPointMultiplier::from_real(1.0).unwrap();
        assert_eq!(requantize(0, &one, 5, 8), 5);
        for acc in [-1000, -129, -128, -3, 0, 42, 127, 128, 5000] {
            assert_eq!(requantize(acc, &one, 0, 8), acc.clamp(-128, 127) as i32);
        }
        let half = FixedPointMultiplier::from_real(0.5).unwrap();
        assert_eq!(requantize(3, &half, 0, 8), 2);
        assert_eq!(requantize(5, &half, 0, 8), 2);
        assert_eq!(requantize(-3, &half, 0, 8), -2);
    }

    #[test]
    fn requantize_matches_real_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100_000 {
            let acc: i128 = rng.random_range(-(1i128 << 31)..(1i128 << 31));
            let ratio = 2f64.powf(rng.random_range(-30.0..2.0));
            let z = rng.random_range(-128..128);
            let fpm = FixedPointMultiplier::from_real(ratio).unwrap();
            let got = requantize(acc, &fpm, z, 8);
            let want = quantize(acc as f64 * ratio, &QuantParams { scale: 1.0, zero_point: z, bits: 8 });
            assert!((got - want).abs() <= 1, "acc {acc} ratio {ratio}: {got} vs {want}");
        }
    }

    #[test]
    fn shift_round_ties_to_even() {
        assert_eq!(shift_round(5, 1).unwrap(), 2);
        assert_eq!(shift_round(7, 1).unwrap(), 4);
        assert_eq!(shift_round(-5, 1).unwrap(), -2);
        assert_eq!(shift_round(-7, 1).unwrap(), -4);
        assert_eq!(shift_round(3, -2).unwrap(), 12);
        assert_eq!(div_round(5, 2), 2);
        assert_eq!(div_round(-7, 2), -4);
    }

    #[test]
    fn dyadic_round_trip() {
        for x in [0.0, 1.0, -0.75, 0.04, 3.5e-7, 1234.5678] {
            let d = Dyadic::from_real(x).unwrap();
            assert!((d.to_real() - x).abs() <= x.abs() * 2f64.powi(-23));
        }
    }

    fn q(t: &Tensor) -> QuantizedTensor {
        quantize_tensor(t, Granularity::PerTensor, 8).unwrap()
    }

    #[test]
    fn zero_input_gives_zero_point() {
        let w = Tensor::from_dims(&[2, 1, 2, 2], vec![0.5, -0.25, 1.0, 0.0, -1.0, 0.75, 0.25, 0.5]).unwrap();
        let layer = Layer::conv2d(w.clone(), None, Window2d::square(2)).unwrap();
        let x = Tensor::zeros(crate::tensor::Shape::new([1, 3, 3]).unwrap());
        let out = ParamSet::Tensor(QuantParams::new(0.01, 7, 8).unwrap());
        let y = conv2d_s8(&layer, &q(&x), &q(&w), &out, 32).unwrap();
        assert!(y.data().iter().all(|&v| v == 7));
    }

    #[test]
    fn single_tap_conv_is_exact() {
        let w = Tensor::from_dims(&[1, 1, 1, 1], vec![0.5]).unwrap();
        let layer = Layer::conv2d(w.clone(), None, Window2d::square(1)).unwrap();
        let x = Tensor::from_dims(&[1, 1, 4], vec![-1.0, 0.0, 0.5, 1.0]).unwrap();
        let (qx, qw) = (q(&x), q(&w));
        let out = ParamSet::Tensor(QuantParams::new(1.0 / 255.0, 0, 8).unwrap());
        let y = conv2d_s8(&layer, &qx, &qw, &out, 32).unwrap();
        let emu: Vec<i32> = qx
            .dequantize()
            .data()
            .iter()
            .map(|&v| quantize(v * qw.dequantize().data()[0], out.group(0)))
            .collect();
        assert_eq!(y.data(), &emu[..]);
    }

    #[test]
    fn narrow_cast_width_overflows() {
        let w = Tensor::from_dims(&[1, 64], vec![1.0; 64]).unwrap();
        let layer = Layer::linear(w.clone(), None).unwrap();
        let x = Tensor::from_dims(&[64], vec![1.0; 64]).unwrap();
        let (qx, qw) = (quantize_tensor(&x, Granularity::PerTensor, 8).unwrap(), q(&w));
        let out = ParamSet::Tensor(QuantParams::new(1.0, 0, 8).unwrap());
        assert!(matches!(linear_s8(&layer, &qx, &qw, &out, 16), Err(Error::AccumulatorOverflow(_))));
        assert!(linear_s8(&layer, &qx, &qw, &out, 32).is_ok());
    }

    #[test]
    fn int_estimator_zero_and_constant() {
        let w = Tensor::from_dims(&[2, 3], vec![0.5; 6]).unwrap();
        let layer = Layer::linear(w.clone(), None).unwrap();
        let ws = IntWeightStats::new(&fit_weight_stats(&w, Granularity::PerTensor).unwrap(), None).unwrap();
        let zero = q(&Tensor::from_dims(&[3], vec![0.0; 3]).unwrap());
        let e = estimate_moments_int(&zero, &layer, &ws, &StrideConfig::default()).unwrap();
        assert_eq!((e.mean[0], e.var[0]), (0, 0));
        let c = q(&Tensor::from_dims(&[3], vec![2.0, 1.0, 0.0]).unwrap());
        let e = estimate_moments_int(&c, &layer, &ws, &StrideConfig::default()).unwrap();
        let m = aggregate_int(&e, Granularity::PerTensor).unwrap()[0];
        let (lo, hi) = m.interval(512, 768);
        assert_eq!((lo, hi), (m.mean, m.mean));
        let sum: f64 = c.dequantize().data().iter().sum();
        assert!((m.to_real().mean - 0.5 * sum).abs() < 1e-6);
    }

    #[test]
    fn int_estimator_tracks_real_estimator() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = rng.random_range(4..64);
            let w = Tensor::from_dims(&[3, d], (0..3 * d).map(|_| rng.random_range(-0.5..0.7)).collect()).unwrap();
            let bias = vec![0.1, -0.2, 0.05];
            let layer = Layer::linear(w.clone(), Some(bias.clone())).unwrap();
            let x = Tensor::from_dims(&[d], (0..d).map(|_| rng.random_range(-2.0..3.0)).collect()).unwrap();
            let qx = q(&x);
            let ws = fit_weight_stats(&w, Granularity::PerTensor).unwrap();
            let real = estimate_linear_outputs(&qx.dequantize(), &ws, Some(&bias)).unwrap();
            let real = aggregate(&real, Granularity::PerTensor, AggregationRule::TotalVariance).unwrap()[0];
            let iws = IntWeightStats::new(&ws, Some(&bias)).unwrap();
            let int = estimate_moments_int(&qx, &layer, &iws, &StrideConfig::default()).unwrap();
            let int = aggregate_int(&int, Granularity::PerTensor).unwrap()[0].to_real();
            assert!((int.mean - real.mean).abs() <= 1e-5 * (1.0 + real.mean.abs()));
            assert!((int.var - real.var).abs() <= 1e-5 * (1.0 + real.var));
        }
    }

    proptest! {
        #[test]
        fn isqrt_brackets(n in any::<u64>()) {
            let r = isqrt(n) as u128;
            prop_assert!(r * r <= n as u128 && (r + 1) * (r + 1) > n as u128);
        }

        #[test]
        fn requantize_monotone(a in -(1i128 << 40)..(1i128 << 40), d in 0i128..1000, r in 1e-6f64..4.0) {
            let f = FixedPointMultiplier::from_real(r).unwrap();
            prop_assert!(requantize(a, &f, 3, 8) <= requantize(a + d, &f, 3, 8));
        }
    }
}
