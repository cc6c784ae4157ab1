//! Analytical memory and operation counts per weighted layer.
//!
//! Counts are multiply-accumulates (MACs) and comparisons, not cycles. The
//! estimator count is the exact number of MACs the conv and linear estimators
//! record in [`PositionEstimates::macs`](crate::surrogate::PositionEstimates).

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Window2d;
use crate::nn::{Layer, ModelGraph};
use crate::schemes::Scheme;
use crate::surrogate::{lattice, StrideConfig};
use crate::tensor::Shape;

/// Extra bits held per layer beyond the b-bit tensors: `output_len` is the
/// number of widened output elements `h`.
pub fn memory_overhead(scheme: Scheme, output_len: usize, cast_bits: u32) -> u64 {
    let b = cast_bits as u64;
    match scheme {
        Scheme::Static => 3 * b,
        Scheme::Dynamic => b * output_len as u64 + 3 * b,
        // Static's 3b' plus one mean and one variance register.
        Scheme::Probabilistic => 5 * b,
    }
}

/// Sum over lattice positions of the in-bounds taps along one axis.
fn lattice_taps(window: &Window2d, axis: usize, n: usize, out: usize, spacing: usize) -> u64 {
    lattice(out, spacing).map(|o| window.taps_in_bounds(axis, o, n).len() as u64).sum()
}

/// MACs the estimator spends on `layer` for an input of shape `input`.
///
/// Conv: two MACs (Σx and Σx²) per in-bounds tap at each lattice position,
/// shared by every output channel. The stride is clamped to the output
/// resolution as calibration does. Linear: `2d`.
pub fn estimator_ops(layer: &Layer, input: &Shape, gamma: &StrideConfig) -> Result<u64> {
    match layer {
        Layer::Linear { .. } => Ok(2 * input.numel() as u64),
        Layer::Conv2d { window, .. } => {
            let (c, h, w) = chw_dims(input)?;
            let (oh, ow) = window.output_hw(h, w)?;
            let g = gamma.clamped_to(oh, ow).0.spacing();
            Ok(2 * c as u64 * lattice_taps(window, 0, h, oh, g) * lattice_taps(window, 1, w, ow, g))
        }
        other => Err(Error::InvalidConfig(format!("{} has no estimator", other.kind()))),
    }
}

/// MACs of the layer itself, padded taps excluded.
pub fn kernel_ops(layer: &Layer, input: &Shape) -> Result<u64> {
    match layer {
        Layer::Linear { weight, .. } => Ok(weight.len() as u64),
        Layer::Conv2d { weight, window, .. } => {
            let (c, h, w) = chw_dims(input)?;
            let (oh, ow) = window.output_hw(h, w)?;
            let out_ch = weight.dims()[0] as u64;
            Ok(out_ch * c as u64 * lattice_taps(window, 0, h, oh, 1) * lattice_taps(window, 1, w, ow, 1))
        }
        other => Err(Error::InvalidConfig(format!("{} has no kernel MACs", other.kind()))),
    }
}

fn chw_dims(s: &Shape) -> Result<(usize, usize, usize)> {
    match *s.dims() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("expected CHW input, got {s}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LayerCost {
    pub layer_index: usize,
    pub kind: &'static str,
    pub scheme: Scheme,
    pub memory_overhead_bits: u64,
    /// Zero unless the scheme runs the estimator.
    pub estimator_ops: u64,
    pub kernel_ops: u64,
    /// Extrema tracking over the widened output (dynamic only).
    pub extrema_cmps: u64,
}

pub fn layer_cost(
    model: &ModelGraph,
    index: usize,
    scheme: Scheme,
    gamma: &StrideConfig,
    cast_bits: u32,
) -> Result<LayerCost> {
    let layer = &model.layers()[index];
    let input = model.layer_input_shape(index);
    let h = model.output_shape(index).numel();
    Ok(LayerCost {
        layer_index: index,
        kind: layer.kind(),
        scheme,
        memory_overhead_bits: memory_overhead(scheme, h, cast_bits),
        estimator_ops: match scheme {
            Scheme::Probabilistic => estimator_ops(layer, input, gamma)?,
            _ => 0,
        },
        kernel_ops: kernel_ops(layer, input)?,
        extrema_cmps: match scheme {
            Scheme::Dynamic => h as u64,
            _ => 0,
        },
    })
}

/// Costs of every weighted layer and their column sums.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CostReport {
    pub rows: Vec<LayerCost>,
    pub totals: LayerTotals,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LayerTotals {
    pub memory_overhead_bits: u64,
    pub estimator_ops: u64,
    pub kernel_ops: u64,
    pub extrema_cmps: u64,
}

pub const CSV_HEADER: &str = "layer,scheme,mem_overhead_bits,estimator_macs,kernel_macs,extrema_cmps";

pub fn report(model: &ModelGraph, scheme: Scheme, gamma: &StrideConfig, cast_bits: u32) -> Result<CostReport> {
    let rows = model
        .weighted_layers()
        .map(|(i, _)| layer_cost(model, i, scheme, gamma, cast_bits))
        .collect::<Result<Vec<_>>>()?;
    let totals = rows.iter().fold(LayerTotals::default(), |t, r| LayerTotals {
        memory_overhead_bits: t.memory_overhead_bits + r.memory_overhead_bits,
        estimator_ops: t.estimator_ops + r.estimator_ops,
        kernel_ops: t.kernel_ops + r.kernel_ops,
        extrema_cmps: t.extrema_cmps + r.extrema_cmps,
    });
    Ok(CostReport { rows, totals })
}

impl CostReport {
    /// One row per layer, then a `total` row; LF line endings.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.layer_index,
                r.scheme.name(),
                r.memory_overhead_bits,
                r.estimator_ops,
                r.kernel_ops,
                r.extrema_cmps
            );
        }
        if let Some(first) = self.rows.first() {
            let t = &self.totals;
            let _ = writeln!(
                out,
                "total,{},{},{},{},{}",
                first.scheme.name(),
                t.memory_overhead_bits,
                t.estimator_ops,
                t.kernel_ops,
                t.extrema_cmps
            );
        }
        out
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>5}  {:<7}  {:<8}  {:>14}  {:>14}  {:>14}  {:>12}\n",
            "layer", "kind", "scheme", "mem bits", "estimator MACs", "kernel MACs", "extrema cmps"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:>5}  {:<7}  {:<8}  {:>14}  {:>14}  {:>14}  {:>12}",
                r.layer_index,
                r.kind,
                r.scheme.name(),
                r.memory_overhead_bits,
                r.estimator_ops,
                r.kernel_ops,
                r.extrema_cmps
            );
        }
        let t = &self.totals;
        let _ = writeln!(
            out,
            "{:>5}  {:<7}  {:<8}  {:>14}  {:>14}  {:>14}  {:>12}",
            "total", "", "", t.memory_overhead_bits, t.estimator_ops, t.kernel_ops, t.extrema_cmps
        );
        out
    }
}
