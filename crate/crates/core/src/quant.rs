//! Affine quantization on a signed integer grid.
//!
//! A real `x` maps to `clamp(round(x / s) + z, -2^(b-1), 2^(b-1) - 1)` and back
//! to `s * (q - z)`. Rounding is half-to-even throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{stats_of, Shape, Tensor};

pub const MIN_BITS: u32 = 2;
pub const MAX_BITS: u32 = 16;

/// Whether one parameter set covers a whole tensor or each axis-0 slice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    #[serde(rename = "tensor")]
    PerTensor,
    #[serde(rename = "channel")]
    PerChannel,
}

impl Granularity {
    pub fn short(self) -> &'static str {
        match self {
            Granularity::PerTensor => "T",
            Granularity::PerChannel => "C",
        }
    }
}

impl std::fmt::Display for Granularity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Granularity::PerTensor => "tensor",
            Granularity::PerChannel => "channel",
        })
    }
}

pub fn check_bits(bits: u32) -> Result<()> {
    if (MIN_BITS..=MAX_BITS).contains(&bits) {
        Ok(())
    } else {
        Err(Error::InvalidBitWidth(bits))
    }
}

/// Lowest grid level, `-2^(b-1)`.
pub fn grid_min(bits: u32) -> i32 {
    -(1 << (bits - 1))
}

/// Highest grid level, `2^(b-1) - 1`.
pub fn grid_max(bits: u32) -> i32 {
    (1 << (bits - 1)) - 1
}

/// Scale, zero-point and bit-width of an affine quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f64,
    pub zero_point: i32,
    pub bits: u32,
}

impl QuantParams {
    pub fn new(scale: f64, zero_point: i32, bits: u32) -> Result<Self> {
        check_bits(bits)?;
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::InvalidConfig(format!("scale {scale} must be positive")));
        }
        if zero_point < grid_min(bits) || zero_point > grid_max(bits) {
            return Err(Error::InvalidConfig(format!(
                "zero-point {zero_point} off the {bits}-bit grid"
            )));
        }
        Ok(QuantParams { scale, zero_point, bits })
    }

    pub fn quantize(&self, x: f64) -> i32 {
        quantize(x, self)
    }

    pub fn dequantize(&self, q: i32) -> f64 {
        dequantize(q, self)
    }
}

/// Maps a real to the grid; saturates outside the representable range.
pub fn quantize(x: f64, p: &QuantParams) -> i32 {
    let lo = grid_min(p.bits) as f64;
    let hi = grid_max(p.bits) as f64;
    let v = (x / p.scale).round_ties_even() + p.zero_point as f64;
    // NaN never reaches here: tensors reject non-finite data.
    v.clamp(lo, hi) as i32
}

pub fn dequantize(q: i32, p: &QuantParams) -> f64 {
    p.scale * (q - p.zero_point) as f64
}

/// Parameters covering `[m, max]` at `bits` bits.
///
/// `s = (max - m) / (2^b - 1)`, `z = -round(m / s) - 2^(b-1)`, with `z`
/// clamped to the grid. A zero-width range gets `s = max(|max|, 1) * 2^-20`
/// and `z = -2^(b-1)`.
pub fn qparams_from_range(m: f64, max: f64, bits: u32) -> Result<QuantParams> {
    check_bits(bits)?;
    if !(m.is_finite() && max.is_finite()) || max < m {
        return Err(Error::InvalidRange { min: m, max });
    }
    let offset = 1i64 << (bits - 1);
    if max == m {
        let scale = max.abs().max(1.0) * 2f64.powi(-20);
        return Ok(QuantParams { scale, zero_point: -(offset as i32), bits });
    }
    let levels = ((1u64 << bits) - 1) as f64;
    let scale = (max - m) / levels;
    let z = -(m / scale).round_ties_even() - offset as f64;
    let zero_point = z.clamp(grid_min(bits) as f64, grid_max(bits) as f64) as i32;
    Ok(QuantParams { scale, zero_point, bits })
}

/// One parameter set per axis-0 slice, sharing a bit-width.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelQuantParams {
    params: Vec<QuantParams>,
}

impl ChannelQuantParams {
    pub fn new(params: Vec<QuantParams>) -> Result<Self> {
        let first = params.first().ok_or(Error::Empty("per-channel parameter list"))?;
        if params.iter().any(|p| p.bits != first.bits) {
            return Err(Error::InvalidConfig("per-channel bit-widths differ".into()));
        }
        Ok(ChannelQuantParams { params })
    }

    pub fn params(&self) -> &[QuantParams] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn bits(&self) -> u32 {
        self.params[0].bits
    }
}

/// Parameters governing a quantized tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamSet {
    Tensor(QuantParams),
    Channel(ChannelQuantParams),
}

impl ParamSet {
    pub fn bits(&self) -> u32 {
        match self {
            ParamSet::Tensor(p) => p.bits,
            ParamSet::Channel(c) => c.bits(),
        }
    }

    pub fn granularity(&self) -> Granularity {
        match self {
            ParamSet::Tensor(_) => Granularity::PerTensor,
            ParamSet::Channel(_) => Granularity::PerChannel,
        }
    }

    /// Number of parameter groups (1 for per-tensor).
    pub fn groups(&self) -> usize {
        match self {
            ParamSet::Tensor(_) => 1,
            ParamSet::Channel(c) => c.len(),
        }
    }

    /// Parameters of group `g`; per-tensor sets answer for every group.
    pub fn group(&self, g: usize) -> &QuantParams {
        match self {
            ParamSet::Tensor(p) => p,
            ParamSet::Channel(c) => &c.params[g],
        }
    }

    pub fn as_slice(&self) -> &[QuantParams] {
        match self {
            ParamSet::Tensor(p) => std::slice::from_ref(p),
            ParamSet::Channel(c) => c.params(),
        }
    }
}

/// Integer payload on the signed grid plus its parameters.
///
/// Per-channel parameters split the flat payload into equal contiguous
/// blocks, one per group, so a flattened CHW activation keeps its
/// per-channel parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    shape: Shape,
    data: Vec<i32>,
    params: ParamSet,
}

impl QuantizedTensor {
    pub fn new(shape: Shape, data: Vec<i32>, params: ParamSet) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        if !data.len().is_multiple_of(params.groups()) {
            return Err(Error::ShapeMismatch(format!(
                "{} parameter groups do not divide {} elements",
                params.groups(),
                data.len()
            )));
        }
        let bits = params.bits();
        if data.iter().any(|&q| q < grid_min(bits) || q > grid_max(bits)) {
            return Err(Error::InvalidConfig("payload off the grid".into()));
        }
        Ok(QuantizedTensor { shape, data, params })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn bits(&self) -> u32 {
        self.params.bits()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Elements per parameter group.
    pub fn block(&self) -> usize {
        self.data.len() / self.params.groups()
    }

    /// Parameters governing flat element `i`.
    pub fn params_at(&self, i: usize) -> &QuantParams {
        self.params.group(i / self.block())
    }

    pub fn dequantize(&self) -> Tensor {
        let block = self.block();
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &q)| dequantize(q, self.params.group(i / block)))
            .collect();
        Tensor::from_vec(self.shape.clone(), data).expect("dequantized values are finite")
    }

    /// Same payload under a new shape (e.g. flatten); parameter blocks are kept.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(QuantizedTensor { shape, ..self })
    }

    /// Replaces the payload, keeping shape and parameters.
    pub fn with_data(&self, data: Vec<i32>) -> Result<Self> {
        QuantizedTensor::new(self.shape.clone(), data, self.params.clone())
    }
}

/// Derives parameters from the tensor's own extrema and quantizes it.
///
/// Per-channel granularity uses axis 0 and requires rank >= 2.
pub fn quantize_tensor(t: &Tensor, granularity: Granularity, bits: u32) -> Result<QuantizedTensor> {
    let params = range_params(t, granularity, bits)?;
    quantize_with(t, params)
}

/// Parameters from the tensor's extrema without quantizing it.
pub fn range_params(t: &Tensor, granularity: Granularity, bits: u32) -> Result<ParamSet> {
    match granularity {
        Granularity::PerTensor => {
            let st = t.elementwise_stats()?;
            Ok(ParamSet::Tensor(qparams_from_range(st.min, st.max, bits)?))
        }
        Granularity::PerChannel => {
            if t.shape().rank() < 2 {
                return Err(Error::ShapeMismatch(format!(
                    "per-channel quantization needs a channel axis, got {}",
                    t.shape()
                )));
            }
            let (channels, _) = t.shape().channel_blocks();
            let params = (0..channels)
                .map(|c| {
                    let st = stats_of(t.channel(c))?;
                    qparams_from_range(st.min, st.max, bits)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ParamSet::Channel(ChannelQuantParams::new(params)?))
        }
    }
}

/// Quantizes `t` under the given parameters.
pub fn quantize_with(t: &Tensor, params: ParamSet) -> Result<QuantizedTensor> {
    let groups = params.groups();
    if !t.len().is_multiple_of(groups) {
        return Err(Error::ShapeMismatch(format!(
            "{groups} parameter groups for tensor {}",
            t.shape()
        )));
    }
    let block = t.len() / groups;
    let data = t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| quantize(x, params.group(i / block)))
        .collect();
    QuantizedTensor::new(t.shape().clone(), data, params)
}
