//! Static, dynamic and probabilistic choice of output quantization
//! parameters behind one provider, plus calibration.
//!
//! Every range handed to the quantizer is first widened to contain 0 so the
//! zero-point stays on the grid and ReLU (a clamp at the zero-point) is exact.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intkernel::{aggregate_int, estimate_moments_int, IntWeightStats};
use crate::nn::format::{encode_qds, sha256_hex};
use crate::nn::{Dataset, Layer, ModelGraph};
use crate::quant::{qparams_from_range, ChannelQuantParams, Granularity, ParamSet, QuantParams, QuantizedTensor};
use crate::surrogate::{
    aggregate, calibrate_alpha_beta, estimate_conv, estimate_linear_outputs, fit_weight_stats, interval,
    AggregationRule, CoverageSample, IntervalParams, MomentEstimate, PositionEstimates, StrideConfig, WeightStats,
    DEFAULT_COVERAGE,
};
use crate::tensor::{stats_of, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "static")]
    Static,
    #[serde(rename = "dynamic")]
    Dynamic,
    #[serde(rename = "prob")]
    Probabilistic,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::Probabilistic, Scheme::Dynamic, Scheme::Static];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Static => "static",
            Scheme::Dynamic => "dynamic",
            Scheme::Probabilistic => "prob",
        }
    }

    /// Column prefix in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Scheme::Static => "Stat",
            Scheme::Dynamic => "Dyn",
            Scheme::Probabilistic => "Ours",
        }
    }

    pub fn needs_calibration(self) -> bool {
        self != Scheme::Dynamic
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A scheme at a granularity, grid width `bits` and accumulator width
/// `cast_bits` (> `bits`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SchemeKind {
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub bits: u32,
    pub cast_bits: u32,
}

impl SchemeKind {
    pub fn new(scheme: Scheme, granularity: Granularity, bits: u32, cast_bits: u32) -> Result<Self> {
        crate::quant::check_bits(bits)?;
        if cast_bits <= bits || cast_bits > 64 {
            return Err(Error::InvalidConfig(format!(
                "cast width {cast_bits} must exceed bit-width {bits} and be at most 64"
            )));
        }
        Ok(SchemeKind { scheme, granularity, bits, cast_bits })
    }

    /// 8-bit grid, 32-bit accumulators.
    pub fn default_for(scheme: Scheme, granularity: Granularity) -> Self {
        SchemeKind { scheme, granularity, bits: 8, cast_bits: 32 }
    }
}

/// Settings of the probabilistic estimator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProbConfig {
    pub gamma: StrideConfig,
    pub coverage: f64,
    pub aggregation: AggregationRule,
}

impl Default for ProbConfig {
    fn default() -> Self {
        ProbConfig { gamma: StrideConfig::default(), coverage: DEFAULT_COVERAGE, aggregation: AggregationRule::default() }
    }
}

/// When output parameters become known relative to layer evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Timing {
    BeforeEval,
    AfterEval,
}

/// `[min(lo, 0), max(hi, 0)]` mapped to parameters.
pub fn params_for_range(lo: f64, hi: f64, bits: u32) -> Result<QuantParams> {
    qparams_from_range(lo.min(0.0), hi.max(0.0), bits)
}

/// Per-channel output parameters need a channel axis; vectors fall back to
/// one parameter set.
pub fn effective_granularity(granularity: Granularity, shape: &Shape) -> Granularity {
    if shape.rank() >= 2 {
        granularity
    } else {
        Granularity::PerTensor
    }
}

fn param_set(params: Vec<QuantParams>) -> Result<ParamSet> {
    if params.len() == 1 {
        Ok(ParamSet::Tensor(params[0]))
    } else {
        Ok(ParamSet::Channel(ChannelQuantParams::new(params)?))
    }
}

/// Extrema per parameter group of `t` (one group, or one per channel).
pub fn group_ranges(t: &Tensor, granularity: Granularity) -> Result<Vec<(f64, f64)>> {
    let groups = match effective_granularity(granularity, t.shape()) {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => t.dims()[0],
    };
    t.data()
        .chunks(t.len() / groups)
        .map(|c| stats_of(c).map(|s| (s.min, s.max)))
        .collect()
}

/// Parameters from the tensor's own extrema (dynamic quantization).
pub fn dynamic_params(t: &Tensor, granularity: Granularity, bits: u32) -> Result<ParamSet> {
    let params = group_ranges(t, granularity)?
        .into_iter()
        .map(|(lo, hi)| params_for_range(lo, hi, bits))
        .collect::<Result<Vec<_>>>()?;
    param_set(params)
}

/// Weight statistics used by the estimator of a weighted layer: per output
/// channel for convolutions under per-channel granularity, else per tensor.
pub fn layer_weight_stats(layer: &Layer, granularity: Granularity) -> Result<WeightStats> {
    let w = layer
        .weight()
        .ok_or_else(|| Error::InvalidConfig(format!("{} has no weights", layer.kind())))?;
    let mode = match layer {
        Layer::Conv2d { .. } => granularity,
        _ => Granularity::PerTensor,
    };
    fit_weight_stats(w, mode)
}

/// Position estimates of a weighted layer on a real input, bias included.
pub fn layer_estimates(layer: &Layer, x: &Tensor, ws: &WeightStats, gamma: &StrideConfig) -> Result<PositionEstimates> {
    match layer {
        Layer::Linear { bias, .. } => estimate_linear_outputs(x, ws, bias.as_deref()),
        Layer::Conv2d { bias, window, .. } => {
            let est = estimate_conv(x, ws, window, gamma)?;
            match bias {
                Some(b) => est.with_bias(b),
                None => Ok(est),
            }
        }
        other => Err(Error::InvalidConfig(format!("{} has no estimator", other.kind()))),
    }
}

/// Pools estimates to one per output group; a shared estimate is repeated
/// when the output has more groups than estimate channels.
fn pooled(est: &PositionEstimates, granularity: Granularity, rule: AggregationRule, groups: usize) -> Result<Vec<MomentEstimate>> {
    let mut pooled = aggregate(est, granularity, rule)?;
    if pooled.len() == 1 && groups > 1 {
        pooled = vec![pooled[0]; groups];
    }
    if pooled.len() != groups {
        return Err(Error::ShapeMismatch(format!("{} estimates for {groups} output groups", pooled.len())));
    }
    Ok(pooled)
}

fn output_groups(granularity: Granularity, shape: &Shape) -> usize {
    match effective_granularity(granularity, shape) {
        Granularity::PerTensor => 1,
        Granularity::PerChannel => shape.dims()[0],
    }
}

mod real_format {
    //! Reals as decimal text with 17 significant digits; single-element
    //! lists are written as scalars.

    use serde::de::Deserializer;
    use serde::ser::{SerializeSeq, Serializer};
    use serde::{Deserialize, Serialize};
    use serde_json::value::RawValue;

    struct Real(f64);

    impl Serialize for Real {
        fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
            RawValue::from_string(format!("{:.16e}", self.0))
                .map_err(serde::ser::Error::custom)?
                .serialize(s)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany<T> {
        One(T),
        Many(Vec<T>),
    }

    pub fn ser_reals<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        if v.len() == 1 {
            return Real(v[0]).serialize(s);
        }
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &x in v {
            seq.serialize_element(&Real(x))?;
        }
        seq.end()
    }

    pub fn ser_real_list<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(v.len()))?;
        for &x in v {
            seq.serialize_element(&Real(x))?;
        }
        seq.end()
    }

    pub fn de_reals<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Ok(match OneOrMany::<f64>::deserialize(d)? {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        })
    }

    pub fn ser_ints<S: Serializer>(v: &[i32], s: S) -> Result<S::Ok, S::Error> {
        if v.len() == 1 {
            v[0].serialize(s)
        } else {
            v.serialize(s)
        }
    }

    pub fn de_ints<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<i32>, D::Error> {
        Ok(match OneOrMany::<i32>::deserialize(d)? {
            OneOrMany::One(x) => vec![x],
            OneOrMany::Many(v) => v,
        })
    }

    pub fn ser_opt_real<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => Real(*x).serialize(s),
            None => s.serialize_none(),
        }
    }
}

use real_format::{de_ints, de_reals, ser_ints, ser_opt_real, ser_real_list, ser_reals};

/// Weight moments as stored in a calibration file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightStatsRecord {
    pub mode: Granularity,
    #[serde(serialize_with = "ser_real_list")]
    pub mean: Vec<f64>,
    #[serde(serialize_with = "ser_real_list")]
    pub var: Vec<f64>,
}

impl From<&WeightStats> for WeightStatsRecord {
    fn from(ws: &WeightStats) -> Self {
        WeightStatsRecord { mode: ws.mode, mean: ws.mean.clone(), var: ws.var.clone() }
    }
}

impl WeightStatsRecord {
    pub fn to_stats(&self) -> Result<WeightStats> {
        WeightStats::new(self.mode, self.mean.clone(), self.var.clone())
    }
}

/// Calibration outcome of one weighted layer. Ranges and parameters are
/// scalars for one group and arrays for per-channel groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub layer_index: usize,
    #[serde(serialize_with = "ser_reals", deserialize_with = "de_reals")]
    pub m: Vec<f64>,
    #[serde(rename = "M", serialize_with = "ser_reals", deserialize_with = "de_reals")]
    pub max: Vec<f64>,
    #[serde(serialize_with = "ser_reals", deserialize_with = "de_reals")]
    pub s: Vec<f64>,
    #[serde(serialize_with = "ser_ints", deserialize_with = "de_ints")]
    pub z: Vec<i32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_stats: Option<WeightStatsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_real")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_real")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_real")]
    pub gamma: Option<f64>,
    /// Mean interval coverage reached on the calibration set.
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_real")]
    pub calibration_coverage: Option<f64>,
}

impl LayerRecord {
    pub fn params(&self, bits: u32) -> Result<ParamSet> {
        if self.s.len() != self.z.len() || self.s.is_empty() {
            return Err(Error::Format(format!("layer {}: {} scales for {} zero-points", self.layer_index, self.s.len(), self.z.len())));
        }
        let params = self
            .s
            .iter()
            .zip(&self.z)
            .map(|(&s, &z)| QuantParams::new(s, z, bits))
            .collect::<Result<Vec<_>>>()?;
        param_set(params)
    }

    pub fn interval_params(&self) -> Option<IntervalParams> {
        Some(IntervalParams { alpha: self.alpha?, beta: self.beta? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSet {
    /// SHA-256 of the calibration samples in dataset-file encoding.
    pub id: String,
    pub size: usize,
}

/// Everything a calibrated scheme needs at evaluation time, keyed by layer
/// index and guarded by the model hash.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationRecord {
    pub model_hash: String,
    pub scheme: Scheme,
    pub granularity: Granularity,
    pub bit_width: u32,
    pub cast_width: u32,
    #[serde(default, skip_serializing_if = "Option::is_none", serialize_with = "ser_opt_real")]
    pub coverage_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation: Option<AggregationRule>,
    pub calibration_set: CalibrationSet,
    pub per_layer: Vec<LayerRecord>,
}

impl CalibrationRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn layer(&self, index: usize) -> Option<&LayerRecord> {
        self.per_layer.iter().find(|l| l.layer_index == index)
    }

    pub fn check_model(&self, model: &ModelGraph) -> Result<()> {
        if self.model_hash != model.hash() {
            return Err(Error::ModelHashMismatch { record: self.model_hash.clone(), model: model.hash().to_string() });
        }
        Ok(())
    }
}

/// Per-sample calibration observations of one weighted layer.
struct LayerObservation {
    ranges: Vec<(f64, f64)>,
    coverage: Option<CoverageSample>,
}

/// Static calibration: running extrema of every weighted layer's output.
pub fn calibrate_static(model: &ModelGraph, data: &Dataset, kind: &SchemeKind) -> Result<CalibrationRecord> {
    calibrate(model, data, kind, None)
}

/// Static extrema plus fitted weight statistics and per-layer `(alpha, beta)`.
pub fn calibrate_probabilistic(
    model: &ModelGraph,
    data: &Dataset,
    kind: &SchemeKind,
    cfg: &ProbConfig,
) -> Result<CalibrationRecord> {
    calibrate(model, data, kind, Some(cfg))
}

/// Calibration for `kind`; `prob` adds the estimator fields.
pub fn calibrate(
    model: &ModelGraph,
    data: &Dataset,
    kind: &SchemeKind,
    prob: Option<&ProbConfig>,
) -> Result<CalibrationRecord> {
    if data.is_empty() {
        return Err(Error::Empty("calibration dataset"));
    }
    let weighted: Vec<usize> = model.weighted_layers().map(|(i, _)| i).collect();

    struct Plan {
        ws: WeightStats,
        gamma: Option<StrideConfig>,
    }
    let plans: Option<Vec<Plan>> = prob
        .map(|cfg| {
            weighted
                .iter()
                .map(|&i| {
                    let layer = &model.layers()[i];
                    let ws = layer_weight_stats(layer, kind.granularity)?;
                    let gamma = match layer {
                        Layer::Conv2d { .. } => {
                            let out = model.output_shape(i).dims();
                            let (g, clamped) = cfg.gamma.clamped_to(out[1], out[2]);
                            if clamped {
                                log::warn!(
                                    "layer {i}: sampling stride {} clamped to {} for a {}x{} output",
                                    cfg.gamma.gamma(),
                                    g.gamma(),
                                    out[1],
                                    out[2]
                                );
                            }
                            Some(g)
                        }
                        _ => None,
                    };
                    Ok(Plan { ws, gamma })
                })
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;

    let observe = |x: &Tensor| -> Result<Vec<LayerObservation>> {
        let (_, trace) = model.forward_float(x)?;
        weighted
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let out = &trace.outputs[i];
                let ranges = group_ranges(out, kind.granularity)?;
                let coverage = match (&plans, prob) {
                    (Some(plans), Some(cfg)) => {
                        let layer = &model.layers()[i];
                        let input = if i == 0 { x } else { &trace.outputs[i - 1] };
                        let plan = &plans[k];
                        let est = layer_estimates(layer, input, &plan.ws, &plan.gamma.unwrap_or_default())?;
                        let groups = output_groups(kind.granularity, out.shape());
                        let estimates = pooled(&est, effective_granularity(kind.granularity, out.shape()), cfg.aggregation, groups)?;
                        Some(CoverageSample { preacts: out.data().to_vec(), estimates })
                    }
                    _ => None,
                };
                Ok(LayerObservation { ranges, coverage })
            })
            .collect()
    };
    let per_sample: Vec<Vec<LayerObservation>> =
        data.samples().par_iter().map(observe).collect::<Result<Vec<_>>>()?;

    let mut per_layer = Vec::with_capacity(weighted.len());
    for (k, &i) in weighted.iter().enumerate() {
        let mut ranges = per_sample[0][k].ranges.clone();
        for obs in &per_sample[1..] {
            for (r, &(lo, hi)) in ranges.iter_mut().zip(&obs[k].ranges) {
                r.0 = r.0.min(lo);
                r.1 = r.1.max(hi);
            }
        }
        let params = ranges
            .iter()
            .map(|&(lo, hi)| params_for_range(lo, hi, kind.bits))
            .collect::<Result<Vec<_>>>()?;
        let mut rec = LayerRecord {
            layer_index: i,
            m: ranges.iter().map(|r| r.0).collect(),
            max: ranges.iter().map(|r| r.1).collect(),
            s: params.iter().map(|p| p.scale).collect(),
            z: params.iter().map(|p| p.zero_point).collect(),
            weight_stats: None,
            alpha: None,
            beta: None,
            gamma: None,
            calibration_coverage: None,
        };
        if let (Some(plans), Some(cfg)) = (&plans, prob) {
            let samples: Vec<CoverageSample> =
                per_sample.iter().map(|obs| obs[k].coverage.clone().expect("recorded")).collect();
            let cal = calibrate_alpha_beta(&samples, cfg.coverage)?;
            if !cal.reached {
                log::warn!("layer {i}: coverage target {} unreachable, realized {:.6}", cfg.coverage, cal.coverage);
            }
            rec.weight_stats = Some((&plans[k].ws).into());
            rec.alpha = Some(cal.params.alpha);
            rec.beta = Some(cal.params.beta);
            rec.gamma = plans[k].gamma.map(|g| g.gamma());
            rec.calibration_coverage = Some(cal.coverage);
        }
        per_layer.push(rec);
    }

    let scheme = if prob.is_some() { Scheme::Probabilistic } else { kind.scheme };
    Ok(CalibrationRecord {
        model_hash: model.hash().to_string(),
        scheme,
        granularity: kind.granularity,
        bit_width: kind.bits,
        cast_width: kind.cast_bits,
        coverage_target: prob.map(|c| c.coverage),
        aggregation: prob.map(|c| c.aggregation),
        calibration_set: CalibrationSet { id: sha256_hex(&encode_qds(data)), size: data.len() },
        per_layer,
    })
}

/// Output parameters of one layer evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputParams {
    pub params: ParamSet,
    pub timing: Timing,
    /// Predicted intervals per output group (probabilistic only).
    pub intervals: Option<Vec<(f64, f64)>>,
}

struct ProbLayer {
    ws: WeightStats,
    int_ws: IntWeightStats,
    ip: IntervalParams,
    gamma: StrideConfig,
}

/// Supplies output parameters for every weighted layer under one scheme.
pub struct OutputParamsProvider<'a> {
    model: &'a ModelGraph,
    kind: SchemeKind,
    static_params: Vec<Option<ParamSet>>,
    prob: Vec<Option<ProbLayer>>,
    aggregation: AggregationRule,
    int_estimator: bool,
}

impl<'a> OutputParamsProvider<'a> {
    /// `record` is required by static and probabilistic schemes and must
    /// belong to `model`. `int_estimator` runs the probabilistic estimator in
    /// fixed point on the quantized input.
    pub fn new(
        model: &'a ModelGraph,
        kind: SchemeKind,
        record: Option<&CalibrationRecord>,
        int_estimator: bool,
    ) -> Result<Self> {
        let n = model.layers().len();
        let mut provider = OutputParamsProvider {
            model,
            kind,
            static_params: (0..n).map(|_| None).collect(),
            prob: (0..n).map(|_| None).collect(),
            aggregation: AggregationRule::default(),
            int_estimator,
        };
        if !kind.scheme.needs_calibration() {
            return Ok(provider);
        }
        let rec = record.ok_or_else(|| Error::Uncalibrated(format!("{} needs a calibration record", kind.scheme)))?;
        rec.check_model(model)?;
        if rec.granularity != kind.granularity || rec.bit_width != kind.bits {
            return Err(Error::InvalidConfig(format!(
                "record calibrated for {}/{} bits, scheme asks for {}/{} bits",
                rec.granularity, rec.bit_width, kind.granularity, kind.bits
            )));
        }
        provider.aggregation = rec.aggregation.unwrap_or_default();
        for (i, layer) in model.weighted_layers() {
            let lr = rec
                .layer(i)
                .ok_or_else(|| Error::Uncalibrated(format!("layer {i} missing from the record")))?;
            match kind.scheme {
                Scheme::Static => provider.static_params[i] = Some(lr.params(kind.bits)?),
                Scheme::Probabilistic => {
                    let (Some(ws), Some(ip)) = (&lr.weight_stats, lr.interval_params()) else {
                        return Err(Error::Uncalibrated(format!("layer {i} has no estimator calibration")));
                    };
                    let ws = ws.to_stats()?;
                    provider.prob[i] = Some(ProbLayer {
                        int_ws: IntWeightStats::new(&ws, layer.bias())?,
                        ws,
                        ip,
                        gamma: lr.gamma.map(StrideConfig::new).transpose()?.unwrap_or_default(),
                    });
                }
                Scheme::Dynamic => unreachable!(),
            }
        }
        Ok(provider)
    }

    pub fn kind(&self) -> &SchemeKind {
        &self.kind
    }

    /// Output parameters for weighted layer `index` given its quantized input
    /// and, for the dynamic scheme only, its widened output.
    pub fn output_params(
        &self,
        index: usize,
        input: &QuantizedTensor,
        widened: Option<&Tensor>,
    ) -> Result<OutputParams> {
        match self.kind.scheme {
            Scheme::Static => {
                let params = self.static_params[index]
                    .clone()
                    .ok_or_else(|| Error::Uncalibrated(format!("layer {index}")))?;
                Ok(OutputParams { params, timing: Timing::BeforeEval, intervals: None })
            }
            Scheme::Dynamic => {
                let w = widened.ok_or(Error::MissingWidenedOutput)?;
                Ok(OutputParams {
                    params: dynamic_params(w, self.kind.granularity, self.kind.bits)?,
                    timing: Timing::AfterEval,
                    intervals: None,
                })
            }
            Scheme::Probabilistic => {
                let intervals = if self.int_estimator {
                    self.intervals_int(index, input)?
                } else {
                    self.intervals(index, &input.dequantize())?
                };
                self.params_from_intervals(intervals)
            }
        }
    }

    fn params_from_intervals(&self, intervals: Vec<(f64, f64)>) -> Result<OutputParams> {
        let params = intervals
            .iter()
            .map(|&(lo, hi)| params_for_range(lo, hi, self.kind.bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(OutputParams { params: param_set(params)?, timing: Timing::BeforeEval, intervals: Some(intervals) })
    }

    fn prob_layer(&self, index: usize) -> Result<(&Layer, &ProbLayer, &Shape)> {
        let pl = self.prob[index]
            .as_ref()
            .ok_or_else(|| Error::Uncalibrated(format!("layer {index} has no estimator calibration")))?;
        Ok((&self.model.layers()[index], pl, self.model.output_shape(index)))
    }

    /// Predicted intervals of layer `index` for a real-valued input.
    pub fn intervals(&self, index: usize, x: &Tensor) -> Result<Vec<(f64, f64)>> {
        let (layer, pl, out) = self.prob_layer(index)?;
        let est = layer_estimates(layer, x, &pl.ws, &pl.gamma)?;
        let gran = effective_granularity(self.kind.granularity, out);
        let pooled = pooled(&est, gran, self.aggregation, output_groups(self.kind.granularity, out))?;
        Ok(pooled.iter().map(|e| interval(e, &pl.ip)).collect())
    }

    /// Probabilistic parameters for a real-valued layer input.
    pub fn prob_params(&self, index: usize, x: &Tensor) -> Result<ParamSet> {
        Ok(self.params_from_intervals(self.intervals(index, x)?)?.params)
    }

    fn intervals_int(&self, index: usize, input: &QuantizedTensor) -> Result<Vec<(f64, f64)>> {
        if self.aggregation != AggregationRule::TotalVariance {
            return Err(Error::InvalidConfig("the integer estimator pools by total variance only".into()));
        }
        let (layer, pl, out) = self.prob_layer(index)?;
        let est = estimate_moments_int(input, layer, &pl.int_ws, &pl.gamma)?;
        let gran = effective_granularity(self.kind.granularity, out);
        let groups = output_groups(self.kind.granularity, out);
        let mut pooled = aggregate_int(&est, gran)?;
        if pooled.len() == 1 && groups > 1 {
            pooled = vec![pooled[0]; groups];
        }
        Ok(pooled.iter().map(|m| m.real_interval(&pl.ip)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Window2d;
    use crate::quant::quantize_tensor;

    fn linear_model(w: Vec<f64>, d: usize, bias: Option<Vec<f64>>) -> ModelGraph {
        let h = w.len() / d;
        let layer = Layer::linear(Tensor::from_dims(&[h, d], w).unwrap(), bias).unwrap();
        ModelGraph::new(Shape::new([d]).unwrap(), vec![layer]).unwrap()
    }

    fn dataset(samples: Vec<Vec<f64>>) -> Dataset {
        let d = samples[0].len();
        let shape = Shape::new([d]).unwrap();
        let n = samples.len();
        let t = samples.into_iter().map(|s| Tensor::from_vec(shape.clone(), s).unwrap()).collect();
        Dataset::new(shape, t, vec![0; n]).unwrap()
    }

    #[test]
    fn static_single_layer_range() {
        let m = linear_model(vec![1.0], 1, None);
        let data = dataset(vec![vec![-1.0], vec![1.0]]);
        let kind = SchemeKind::default_for(Scheme::Static, Granularity::PerTensor);
        let rec = calibrate_static(&m, &data, &kind).unwrap();
        let p = rec.per_layer[0].params(8).unwrap();
        assert_eq!(p, ParamSet::Tensor(QuantParams { scale: 2.0 / 255.0, zero_point: 0, bits: 8 }));
        assert_eq!((rec.per_layer[0].m[0], rec.per_layer[0].max[0]), (-1.0, 1.0));
    }

    #[test]
    fn running_extrema_merge() {
        let m = linear_model(vec![1.0, 1.0], 2, None);
        let data = dataset(vec![vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let kind = SchemeKind::default_for(Scheme::Static, Granularity::PerTensor);
        let rec = calibrate_static(&m, &data, &kind).unwrap();
        assert_eq!((rec.per_layer[0].m[0], rec.per_layer[0].max[0]), (-1.0, 1.0));
    }

    #[test]
    fn per_channel_ranges_are_independent() {
        let mut k = vec![0.0; 2 * 9];
        k[4] = 1.0;
        k[9 + 4] = -2.0;
        let conv = Layer::conv2d(Tensor::from_dims(&[2, 1, 3, 3], k).unwrap(), None, Window2d::square(3).with_padding(1)).unwrap();
        let m = ModelGraph::new(Shape::new([1, 2, 2]).unwrap(), vec![conv]).unwrap();
        let shape = Shape::new([1, 2, 2]).unwrap();
        let x = Tensor::from_vec(shape.clone(), vec![0.0, 0.5, 1.0, 0.25]).unwrap();
        let data = Dataset::new(shape, vec![x], vec![0]).unwrap();
        let kind = SchemeKind::default_for(Scheme::Static, Granularity::PerChannel);
        let rec = calibrate_static(&m, &data, &kind).unwrap();
        assert_eq!(rec.per_layer[0].m, vec![0.0, -2.0]);
        assert_eq!(rec.per_layer[0].max, vec![1.0, 0.0]);
    }

    #[test]
    fn constant_weights_calibrate_to_zero_width() {
        let m = linear_model(vec![0.5; 3], 3, None);
        let data = dataset(vec![vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]]);
        let kind = SchemeKind::default_for(Scheme::Probabilistic, Granularity::PerTensor);
        let rec = calibrate_probabilistic(&m, &data, &kind, &ProbConfig::default()).unwrap();
        assert_eq!(rec.per_layer[0].interval_params(), Some(IntervalParams { alpha: 0.0, beta: 0.0 }));
    }

    #[test]
    fn dynamic_uses_widened_output() {
        let m = linear_model(vec![1.0; 3], 1, None);
        let kind = SchemeKind::default_for(Scheme::Dynamic, Granularity::PerTensor);
        let p = OutputParamsProvider::new(&m, kind, None, false).unwrap();
        let x = quantize_tensor(&Tensor::from_dims(&[1], vec![1.0]).unwrap(), Granularity::PerTensor, 8).unwrap();
        let y = Tensor::from_dims(&[3], vec![-1.0, 0.0, 1.0]).unwrap();
        let out = p.output_params(0, &x, Some(&y)).unwrap();
        assert_eq!(out.timing, Timing::AfterEval);
        assert_eq!(out.params, ParamSet::Tensor(QuantParams { scale: 2.0 / 255.0, zero_point: 0, bits: 8 }));
        assert!(matches!(p.output_params(0, &x, None), Err(Error::MissingWidenedOutput)));
    }

    #[test]
    fn static_is_input_invariant_and_guarded() {
        let m = linear_model(vec![1.0, -1.0], 2, None);
        let data = dataset(vec![vec![0.0, 1.0], vec![2.0, 0.5]]);
        let kind = SchemeKind::default_for(Scheme::Static, Granularity::PerTensor);
        assert!(matches!(OutputParamsProvider::new(&m, kind, None, false), Err(Error::Uncalibrated(_))));
        let rec = calibrate_static(&m, &data, &kind).unwrap();
        let p = OutputParamsProvider::new(&m, kind, Some(&rec), false).unwrap();
        let q = |v: Vec<f64>| quantize_tensor(&Tensor::from_dims(&[2], v).unwrap(), Granularity::PerTensor, 8).unwrap();
        let a = p.output_params(0, &q(vec![0.0, 1.0]), None).unwrap();
        let b = p.output_params(0, &q(vec![5.0, -3.0]), None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.timing, Timing::BeforeEval);
        let other = linear_model(vec![1.0, 1.0], 2, None);
        assert!(matches!(
            OutputParamsProvider::new(&other, kind, Some(&rec), false),
            Err(Error::ModelHashMismatch { .. })
        ));
    }

    #[test]
    fn prob_scale_is_homogeneous() {
        let m = linear_model(vec![0.3, -0.1, 0.7, 0.2, -0.4, 0.5], 3, None);
        let data = dataset(vec![vec![1.0, 2.0, -1.0], vec![0.5, -1.5, 2.0]]);
        let kind = SchemeKind::default_for(Scheme::Probabilistic, Granularity::PerTensor);
        let rec = calibrate_probabilistic(&m, &data, &kind, &ProbConfig::default()).unwrap();
        let p = OutputParamsProvider::new(&m, kind, Some(&rec), false).unwrap();
        let x = Tensor::from_dims(&[3], vec![0.4, -1.2, 2.5]).unwrap();
        let a = p.prob_params(0, &x).unwrap();
        let b = p.prob_params(0, &x.map(|v| 2.0 * v).unwrap()).unwrap();
        assert_eq!(b.group(0).scale, 2.0 * a.group(0).scale);
        assert_eq!(b.group(0).zero_point, a.group(0).zero_point);
    }

    #[test]
    fn record_json_round_trip_and_precision() {
        let m = linear_model(vec![0.3, -0.1, 0.7, 0.2, -0.4, 0.5], 3, Some(vec![0.1, -0.2]));
        let data = dataset(vec![vec![1.0, 2.0, -1.0], vec![0.5, -1.5, 2.0]]);
        let kind = SchemeKind::default_for(Scheme::Probabilistic, Granularity::PerTensor);
        let rec = calibrate_probabilistic(&m, &data, &kind, &ProbConfig::default()).unwrap();
        let text = rec.to_json().unwrap();
        assert_eq!(CalibrationRecord::from_json(&text).unwrap(), rec);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let layer = &v["per_layer"][0];
        for key in ["layer_index", "m", "M", "s", "z", "weight_stats", "alpha", "beta"] {
            assert!(!layer[key].is_null(), "missing {key}");
        }
        assert!(text.contains(&format!("{:.16e}", rec.per_layer[0].s[0])));
    }

    #[test]
    fn cast_width_must_exceed_bits() {
        assert!(SchemeKind::new(Scheme::Static, Granularity::PerTensor, 8, 8).is_err());
        assert!(SchemeKind::new(Scheme::Static, Granularity::PerTensor, 8, 16).is_ok());
    }
}
