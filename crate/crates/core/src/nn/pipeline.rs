//! Quantized execution of a model under one scheme.
//!
//! Weighted layers take the previous quantized output (the first layer
//! quantizes the sample from its own range), evaluate in widened precision
//! and compress back to the grid. Static and probabilistic parameters are
//! known before evaluation, so outputs are produced and compressed one at a
//! time; dynamic parameters need the whole widened output first.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::intkernel::IntWeighted;
use crate::nn::layer::{pool_map_int, Layer, WeightedEval};
use crate::nn::{Dataset, ModelGraph};
use crate::quant::{quantize, quantize_with, QuantizedTensor};
use crate::schemes::{
    calibrate, dynamic_params, CalibrationRecord, OutputParams, OutputParamsProvider, ProbConfig, SchemeKind, Timing,
};
use crate::tensor::Tensor;

/// Per weighted layer observations of one quantized forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerMetrics {
    pub layer_index: usize,
    /// Mean squared error of the dequantized output against the real forward
    /// pass.
    pub mse: f64,
    /// Most widened output elements alive at once.
    pub peak_widened: usize,
    pub timing: Timing,
    /// Fraction of real outputs inside the predicted interval.
    pub coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardMetrics {
    pub layers: Vec<LayerMetrics>,
}

/// A model with weights on the grid and the scheme that drives it.
pub struct QuantizedModel<'a> {
    model: &'a ModelGraph,
    kind: SchemeKind,
    weights: Vec<Option<QuantizedTensor>>,
    dequantized: Vec<Option<Tensor>>,
    provider: OutputParamsProvider<'a>,
    int_kernels: bool,
}

/// Weight tensors on the grid at the scheme's granularity (axis 0 for
/// per-channel); identical for every scheme sharing granularity and width.
pub fn quantize_weights(model: &ModelGraph, kind: &SchemeKind) -> Result<Vec<Option<QuantizedTensor>>> {
    model
        .layers()
        .iter()
        .map(|l| {
            l.weight()
                .map(|w| quantize_with(w, dynamic_params(w, kind.granularity, kind.bits)?))
                .transpose()
        })
        .collect()
}

impl<'a> QuantizedModel<'a> {
    /// `int_kernels` switches from real-arithmetic emulation to the integer
    /// kernels and fixed-point estimator.
    pub fn new(
        model: &'a ModelGraph,
        kind: SchemeKind,
        record: Option<&CalibrationRecord>,
        int_kernels: bool,
    ) -> Result<Self> {
        let provider = OutputParamsProvider::new(model, kind, record, int_kernels)?;
        let weights = quantize_weights(model, &kind)?;
        let dequantized = weights.iter().map(|w| w.as_ref().map(|q| q.dequantize())).collect();
        Ok(QuantizedModel { model, kind, weights, dequantized, provider, int_kernels })
    }

    pub fn model(&self) -> &ModelGraph {
        self.model
    }

    pub fn kind(&self) -> &SchemeKind {
        &self.kind
    }

    pub fn provider(&self) -> &OutputParamsProvider<'a> {
        &self.provider
    }

    pub fn weights(&self, index: usize) -> Option<&QuantizedTensor> {
        self.weights[index].as_ref()
    }

    /// Quantizes a model input from its own range.
    pub fn quantize_input(&self, x: &Tensor) -> Result<QuantizedTensor> {
        quantize_with(x, dynamic_params(x, self.kind.granularity, self.kind.bits)?)
    }

    /// Runs the model; returns the dequantized output and per-layer metrics.
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, ForwardMetrics)> {
        let (_, trace) = self.model.forward_float(x)?;
        let mut cur = self.quantize_input(x)?;
        let mut layers = Vec::new();
        for (i, layer) in self.model.layers().iter().enumerate() {
            cur = match layer {
                Layer::Conv2d { .. } | Layer::Linear { .. } => {
                    let (out, mut m) = self.weighted(i, layer, &cur)?;
                    m.mse = mse(&out.dequantize(), &trace.outputs[i]);
                    layers.push(m);
                    out
                }
                Layer::Relu => {
                    let data = cur
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &q)| q.max(cur.params_at(k).zero_point))
                        .collect();
                    cur.with_data(data)?
                }
                Layer::MaxPool { window } | Layer::AvgPool { window } => {
                    let out_shape = layer.output_shape(cur.shape())?;
                    let [c, h, w] = *cur.shape().dims() else {
                        return Err(Error::ShapeMismatch(format!("pooling expects CHW, got {}", cur.shape())));
                    };
                    let data = if matches!(layer, Layer::MaxPool { .. }) {
                        pool_map_int(cur.data(), c, h, w, window, |v| *v.iter().max().expect("non-empty window"))?
                    } else {
                        // Widened window sum, requantized with the input parameters.
                        pool_map_int(cur.data(), c, h, w, window, |v| {
                            let sum: i128 = v.iter().map(|&q| q as i128).sum();
                            crate::intkernel::div_round(sum, v.len() as i128) as i32
                        })?
                    };
                    QuantizedTensor::new(out_shape, data, cur.params().clone())?
                }
                Layer::Flatten => {
                    let shape = layer.output_shape(cur.shape())?;
                    cur.reshape(shape)?
                }
            };
        }
        Ok((cur.dequantize(), ForwardMetrics { layers }))
    }

    fn weighted(&self, i: usize, layer: &Layer, input: &QuantizedTensor) -> Result<(QuantizedTensor, LayerMetrics)> {
        let out_shape = self.model.output_shape(i).clone();
        let qw = self.weights[i].as_ref().expect("weighted layer");
        let metrics = |peak_widened, timing, coverage| LayerMetrics {
            layer_index: i,
            mse: 0.0,
            peak_widened,
            timing,
            coverage,
        };
        if self.int_kernels {
            let k = IntWeighted::new(layer, input, qw, self.kind.cast_bits)?;
            if self.kind.scheme == crate::schemes::Scheme::Dynamic {
                let accs = k.widen_all()?;
                let widened = Tensor::from_vec(out_shape.clone(), accs.iter().enumerate().map(|(o, &a)| k.real(o, a)).collect())?;
                let op = self.provider.output_params(i, input, Some(&widened))?;
                let data = k.requantize_all(&accs, &op.params)?;
                let out = QuantizedTensor::new(out_shape, data, op.params)?;
                return Ok((out, metrics(accs.len(), op.timing, None)));
            }
            let op = self.provider.output_params(i, input, None)?;
            let mut counter = CoverageCounter::new(&op, k.len());
            let data = k.run_observed(&op.params, |o, y| counter.observe(o, y))?;
            let coverage = counter.finish();
            let out = QuantizedTensor::new(out_shape, data, op.params)?;
            return Ok((out, metrics(1, op.timing, coverage)));
        }

        let xhat = input.dequantize();
        let wd = self.dequantized[i].as_ref().expect("weighted layer");
        let eval = WeightedEval::new(layer, input.shape(), wd.data())?;
        let n = out_shape.numel();
        if self.kind.scheme == crate::schemes::Scheme::Dynamic {
            let widened = Tensor::from_vec(out_shape.clone(), (0..n).map(|o| eval.at(xhat.data(), o)).collect())?;
            let op = self.provider.output_params(i, input, Some(&widened))?;
            let out = quantize_with(&widened, op.params)?;
            return Ok((out, metrics(n, op.timing, None)));
        }
        let op = self.provider.output_params(i, input, None)?;
        let block = n / op.params.groups();
        let mut counter = CoverageCounter::new(&op, n);
        let data = (0..n)
            .map(|o| {
                let y = eval.at(xhat.data(), o);
                counter.observe(o, y);
                quantize(y, op.params.group(o / block))
            })
            .collect();
        let coverage = counter.finish();
        let out = QuantizedTensor::new(out_shape, data, op.params)?;
        Ok((out, metrics(1, op.timing, coverage)))
    }
}

struct CoverageCounter<'p> {
    intervals: Option<&'p [(f64, f64)]>,
    block: usize,
    inside: usize,
    total: usize,
}

impl<'p> CoverageCounter<'p> {
    fn new(op: &'p OutputParams, n: usize) -> Self {
        let intervals = op.intervals.as_deref();
        let block = intervals.map_or(n, |iv| n / iv.len().max(1));
        CoverageCounter { intervals, block, inside: 0, total: 0 }
    }

    fn observe(&mut self, o: usize, y: f64) {
        if let Some(iv) = self.intervals {
            let (lo, hi) = iv[o / self.block];
            self.inside += (lo <= y && y <= hi) as usize;
            self.total += 1;
        }
    }

    fn finish(self) -> Option<f64> {
        self.intervals.map(|_| self.inside as f64 / self.total.max(1) as f64)
    }
}

fn mse(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Quantized forward pass of one sample.
pub fn forward_quantized(
    model: &ModelGraph,
    x: &Tensor,
    kind: SchemeKind,
    record: Option<&CalibrationRecord>,
) -> Result<(Tensor, ForwardMetrics)> {
    QuantizedModel::new(model, kind, record, false)?.forward(x)
}

/// Dataset-level summary of one weighted layer.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSummary {
    pub layer_index: usize,
    pub kind: &'static str,
    pub mse: f64,
    pub peak_widened: usize,
    pub mean_coverage: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1_accuracy: f64,
    pub per_layer: Vec<LayerSummary>,
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    scores
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Top-1 accuracy and mean per-layer metrics over the dataset. Samples run
/// in parallel; results merge in sample order.
pub fn evaluate(qm: &QuantizedModel, data: &Dataset) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let runs: Vec<(bool, ForwardMetrics)> = data
        .samples()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(x, &label)| {
            let (out, m) = qm.forward(x)?;
            Ok((argmax(out.data()) == label as usize, m))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = runs.len() as f64;
    let correct = runs.iter().filter(|r| r.0).count();
    let per_layer = runs[0]
        .1
        .layers
        .iter()
        .enumerate()
        .map(|(k, first)| {
            let cov: Vec<f64> = runs.iter().filter_map(|r| r.1.layers[k].coverage).collect();
            LayerSummary {
                layer_index: first.layer_index,
                kind: qm.model().layers()[first.layer_index].kind(),
                mse: runs.iter().map(|r| r.1.layers[k].mse).sum::<f64>() / n,
                peak_widened: runs.iter().map(|r| r.1.layers[k].peak_widened).max().unwrap_or(0),
                mean_coverage: (!cov.is_empty()).then(|| cov.iter().sum::<f64>() / cov.len() as f64),
            }
        })
        .collect();
    Ok(EvalReport { samples: runs.len(), top1_accuracy: correct as f64 / n, per_layer })
}

/// Calibrates on `calib` when the scheme needs it, then evaluates on `test`.
pub fn calibrate_and_evaluate(
    model: &ModelGraph,
    calib: &Dataset,
    test: &Dataset,
    kind: SchemeKind,
    prob: &ProbConfig,
    int_kernels: bool,
) -> Result<EvalReport> {
    let record = if kind.scheme.needs_calibration() {
        let p = (kind.scheme == crate::schemes::Scheme::Probabilistic).then_some(prob);
        Some(calibrate(model, calib, &kind, p)?)
    } else {
        None
    };
    evaluate(&QuantizedModel::new(model, kind, record.as_ref(), int_kernels)?, test)
}

/// Top-1 accuracy of the real-arithmetic model.
pub fn evaluate_float(model: &ModelGraph, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let correct = data
        .samples()
        .par_iter()
        .zip(data.labels().par_iter())
        .map(|(x, &label)| Ok((argmax(model.forward_float(x)?.0.data()) == label as usize) as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Window2d;
    use crate::nn::PoolKind;
    use crate::quant::Granularity;
    use crate::schemes::{calibrate, ProbConfig, Scheme};
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};

    fn small_cnn(rng: &mut impl Rng) -> ModelGraph {
        let mut t = |dims: &[usize]| {
            let n = dims.iter().product();
            Tensor::from_dims(dims, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
        };
        let k1 = t(&[4, 2, 3, 3]);
        let k2 = t(&[3, 4, 3, 3]);
        let w = t(&[5, 12]);
        ModelGraph::new(
            Shape::new([2, 8, 8]).unwrap(),
            vec![
                Layer::conv2d(k1, Some(vec![0.1, -0.1, 0.2, 0.0]), Window2d::square(3).with_padding(1)).unwrap(),
                Layer::Relu,
                Layer::pool(PoolKind::Max, Window2d::square(2).with_stride(2)).unwrap(),
                Layer::conv2d(k2, None, Window2d::square(3).with_padding(1)).unwrap(),
                Layer::Relu,
                Layer::pool(PoolKind::Avg, Window2d::square(2).with_stride(2)).unwrap(),
                Layer::Flatten,
                Layer::linear(w, Some(vec![0.0, 0.1, -0.1, 0.2, 0.3])).unwrap(),
            ],
        )
        .unwrap()
    }

    fn images(rng: &mut impl Rng, n: usize) -> Dataset {
        let shape = Shape::new([2, 8, 8]).unwrap();
        let samples = (0..n)
            .map(|_| Tensor::from_vec(shape.clone(), (0..128).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
            .collect();
        Dataset::new(shape, samples, (0..n).map(|i| (i % 5) as u16).collect()).unwrap()
    }

    fn record(m: &ModelGraph, data: &Dataset, kind: SchemeKind) -> Option<CalibrationRecord> {
        match kind.scheme {
            Scheme::Dynamic => None,
            Scheme::Static => Some(calibrate(m, data, &kind, None).unwrap()),
            Scheme::Probabilistic => Some(calibrate(m, data, &kind, Some(&ProbConfig::default())).unwrap()),
        }
    }

    #[test]
    fn peak_widened_per_scheme() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let m = small_cnn(&mut rng);
        let data = images(&mut rng, 8);
        for scheme in Scheme::ALL {
            for gran in [Granularity::PerTensor, Granularity::PerChannel] {
                let kind = SchemeKind::default_for(scheme, gran);
                let rec = record(&m, &data, kind);
                let qm = QuantizedModel::new(&m, kind, rec.as_ref(), false).unwrap();
                let (_, metrics) = qm.forward(&data.samples()[0]).unwrap();
                for lm in &metrics.layers {
                    let h = m.output_shape(lm.layer_index).numel();
                    let want = if scheme == Scheme::Dynamic { h } else { 1 };
                    assert_eq!(lm.peak_widened, want, "{scheme} {gran} layer {}", lm.layer_index);
                    assert_eq!(lm.coverage.is_some(), scheme == Scheme::Probabilistic);
                }
            }
        }
    }

    #[test]
    fn wider_grid_lowers_error() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let m = small_cnn(&mut rng);
        let data = images(&mut rng, 4);
        for scheme in Scheme::ALL {
            let k8 = SchemeKind::new(scheme, Granularity::PerTensor, 8, 32).unwrap();
            let k16 = SchemeKind::new(scheme, Granularity::PerTensor, 16, 48).unwrap();
            let (r8, r16) = (record(&m, &data, k8), record(&m, &data, k16));
            let (_, a) = QuantizedModel::new(&m, k8, r8.as_ref(), false).unwrap().forward(&data.samples()[1]).unwrap();
            let (_, b) = QuantizedModel::new(&m, k16, r16.as_ref(), false).unwrap().forward(&data.samples()[1]).unwrap();
            for (la, lb) in a.layers.iter().zip(&b.layers) {
                assert!(lb.mse < la.mse, "{scheme} layer {}: {} vs {}", la.layer_index, lb.mse, la.mse);
            }
        }
    }

    #[test]
    fn sixteen_bit_identity_is_close() {
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let m = ModelGraph::new(
            Shape::new([4]).unwrap(),
            vec![Layer::linear(Tensor::from_dims(&[4, 4], eye).unwrap(), None).unwrap()],
        )
        .unwrap();
        let x = Tensor::from_dims(&[4], vec![-3.0, 0.25, 1.5, 7.0]).unwrap();
        let data = Dataset::new(x.shape().clone(), vec![x.clone()], vec![0]).unwrap();
        for scheme in Scheme::ALL {
            let kind = SchemeKind::new(scheme, Granularity::PerTensor, 16, 32).unwrap();
            let rec = record(&m, &data, kind);
            let (y, _) = forward_quantized(&m, &x, kind, rec.as_ref()).unwrap();
            for (a, b) in y.data().iter().zip(x.data()) {
                assert!((a - b).abs() <= 2f64.powi(-7), "{scheme}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn integer_path_tracks_emulation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let m = small_cnn(&mut rng);
        let data = images(&mut rng, 6);
        for scheme in Scheme::ALL {
            for gran in [Granularity::PerTensor, Granularity::PerChannel] {
                let kind = SchemeKind::default_for(scheme, gran);
                let rec = record(&m, &data, kind);
                let emu = QuantizedModel::new(&m, kind, rec.as_ref(), false).unwrap();
                let int = QuantizedModel::new(&m, kind, rec.as_ref(), true).unwrap();
                for x in data.samples() {
                    let (a, _) = emu.forward(x).unwrap();
                    let (b, _) = int.forward(x).unwrap();
                    let (_, fm) = m.forward_float(x).unwrap();
                    let scale = fm.outputs.last().unwrap().data().iter().fold(0.0f64, |a, v| a.max(v.abs()));
                    for (p, q) in a.data().iter().zip(b.data()) {
                        assert!((p - q).abs() <= 0.1 * scale + 1e-9, "{scheme} {gran}: {p} vs {q}");
                    }
                }
            }
        }
    }

    #[test]
    fn evaluate_constant_prediction() {
        let w = Tensor::from_dims(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = ModelGraph::new(Shape::new([2]).unwrap(), vec![Layer::linear(w, Some(vec![1.0, 0.0])).unwrap()]).unwrap();
        let shape = Shape::new([2]).unwrap();
        let xs = (0..5).map(|i| Tensor::from_vec(shape.clone(), vec![i as f64, 1.0]).unwrap()).collect();
        let all0 = Dataset::new(shape.clone(), xs, vec![0; 5]).unwrap();
        let kind = SchemeKind::default_for(Scheme::Dynamic, Granularity::PerTensor);
        let qm = QuantizedModel::new(&m, kind, None, false).unwrap();
        assert_eq!(evaluate(&qm, &all0).unwrap().top1_accuracy, 1.0);
        assert_eq!(evaluate_float(&m, &all0).unwrap(), 1.0);
        let all1 = Dataset::new(shape, all0.samples().to_vec(), vec![1; 5]).unwrap();
        assert_eq!(evaluate(&qm, &all1).unwrap().top1_accuracy, 0.0);
    }
}
