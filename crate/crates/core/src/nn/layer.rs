use crate::error::{Error, Result};
use crate::geometry::Window2d;
use crate::surrogate::chw;
use crate::tensor::{Shape, Tensor};

/// One layer of a sequential model.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    /// Weights `(out, in, kh, kw)`, optional bias of length `out`.
    Conv2d { weight: Tensor, bias: Option<Vec<f64>>, window: Window2d },
    /// Weights `(out, in)`, optional bias of length `out`.
    Linear { weight: Tensor, bias: Option<Vec<f64>> },
    Relu,
    MaxPool { window: Window2d },
    AvgPool { window: Window2d },
    Flatten,
}

impl Layer {
    pub fn conv2d(weight: Tensor, bias: Option<Vec<f64>>, window: Window2d) -> Result<Self> {
        if weight.shape().rank() != 4 {
            return Err(Error::ShapeMismatch(format!("conv2d weights must be 4-D, got {}", weight.shape())));
        }
        if weight.dims()[2..] != window.kernel {
            return Err(Error::ShapeMismatch(format!(
                "kernel {:?} does not match weights {}",
                window.kernel,
                weight.shape()
            )));
        }
        check_bias(&bias, weight.dims()[0])?;
        Ok(Layer::Conv2d { weight, bias, window })
    }

    pub fn linear(weight: Tensor, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.shape().rank() != 2 {
            return Err(Error::ShapeMismatch(format!("linear weights must be 2-D, got {}", weight.shape())));
        }
        check_bias(&bias, weight.dims()[0])?;
        Ok(Layer::Linear { weight, bias })
    }

    pub fn pool(kind: PoolKind, window: Window2d) -> Result<Self> {
        if window.padding != [0, 0] {
            return Err(Error::InvalidConfig("pooling does not take padding".into()));
        }
        Ok(match kind {
            PoolKind::Max => Layer::MaxPool { window },
            PoolKind::Avg => Layer::AvgPool { window },
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::Linear { .. } => "linear",
            Layer::Relu => "relu",
            Layer::MaxPool { .. } => "maxpool",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
        }
    }

    /// Conv and linear layers carry weights and get output quantization
    /// parameters from a scheme.
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Conv2d { .. } | Layer::Linear { .. })
    }

    pub fn weight(&self) -> Option<&Tensor> {
        match self {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => Some(weight),
            _ => None,
        }
    }

    pub fn bias(&self) -> Option<&[f64]> {
        match self {
            Layer::Conv2d { bias, .. } | Layer::Linear { bias, .. } => bias.as_deref(),
            _ => None,
        }
    }

    pub fn window(&self) -> Option<&Window2d> {
        match self {
            Layer::Conv2d { window, .. } | Layer::MaxPool { window } | Layer::AvgPool { window } => Some(window),
            _ => None,
        }
    }

    /// Input taps feeding one output element (weighted layers), ignoring
    /// padding.
    pub fn fan_in(&self) -> usize {
        match self {
            Layer::Conv2d { weight, .. } | Layer::Linear { weight, .. } => weight.len() / weight.dims()[0],
            _ => 0,
        }
    }

    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        match self {
            Layer::Conv2d { weight, window, .. } => {
                let (c, h, w) = dims3(input)?;
                if c != weight.dims()[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "conv2d expects {} input channels, got {c}",
                        weight.dims()[1]
                    )));
                }
                let (oh, ow) = window.output_hw(h, w)?;
                Shape::new([weight.dims()[0], oh, ow])
            }
            Layer::Linear { weight, .. } => {
                if input.rank() != 1 || input.dims()[0] != weight.dims()[1] {
                    return Err(Error::ShapeMismatch(format!(
                        "linear expects a vector of {}, got {input}",
                        weight.dims()[1]
                    )));
                }
                Shape::new([weight.dims()[0]])
            }
            Layer::Relu => Ok(input.clone()),
            Layer::MaxPool { window } | Layer::AvgPool { window } => {
                let (c, h, w) = dims3(input)?;
                let (oh, ow) = window.output_hw(h, w)?;
                Shape::new([c, oh, ow])
            }
            Layer::Flatten => Shape::new([input.numel()]),
        }
    }

    /// Real-arithmetic forward pass.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out_shape = self.output_shape(x.shape())?;
        let data = match self {
            Layer::Conv2d { .. } | Layer::Linear { .. } => {
                let eval = WeightedEval::new(self, x.shape(), self.weight().unwrap().data())?;
                (0..out_shape.numel()).map(|o| eval.at(x.data(), o)).collect()
            }
            Layer::Relu => x.data().iter().map(|v| v.max(0.0)).collect(),
            Layer::MaxPool { window } => {
                pool_map(x, window, |vals| vals.iter().copied().fold(f64::NEG_INFINITY, f64::max))?
            }
            Layer::AvgPool { window } => {
                pool_map(x, window, |vals| vals.iter().sum::<f64>() / vals.len() as f64)?
            }
            Layer::Flatten => x.data().to_vec(),
        };
        Tensor::from_vec(out_shape, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

fn check_bias(bias: &Option<Vec<f64>>, out: usize) -> Result<()> {
    match bias {
        Some(b) if b.len() != out => Err(Error::ShapeMismatch(format!(
            "bias of length {} for {out} outputs",
            b.len()
        ))),
        Some(b) if b.iter().any(|v| !v.is_finite()) => Err(Error::NonFinite),
        _ => Ok(()),
    }
}

fn dims3(s: &Shape) -> Result<(usize, usize, usize)> {
    match *s.dims() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::ShapeMismatch(format!("expected CHW activation, got {s}"))),
    }
}

/// Gathers the window of every pooling output and reduces it with `f`.
pub(crate) fn pool_map(x: &Tensor, window: &Window2d, f: impl Fn(&[f64]) -> f64) -> Result<Vec<f64>> {
    let (c, h, w) = chw(x)?;
    let (oh, ow) = window.output_hw(h, w)?;
    let data = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut buf = Vec::with_capacity(window.kernel[0] * window.kernel[1]);
    for r in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                buf.clear();
                for q in window.taps_in_bounds(0, i, h) {
                    for t in window.taps_in_bounds(1, j, w) {
                        buf.push(data[(r * h + window.input_index(0, i, q)) * w + window.input_index(1, j, t)]);
                    }
                }
                out.push(f(&buf));
            }
        }
    }
    Ok(out)
}

/// Pooling windows over integer payloads (quantized pooling).
pub(crate) fn pool_map_int(
    data: &[i32],
    c: usize,
    h: usize,
    w: usize,
    window: &Window2d,
    f: impl Fn(&[i32]) -> i32,
) -> Result<Vec<i32>> {
    let (oh, ow) = window.output_hw(h, w)?;
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut buf = Vec::with_capacity(window.kernel[0] * window.kernel[1]);
    for r in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                buf.clear();
                for q in window.taps_in_bounds(0, i, h) {
                    for t in window.taps_in_bounds(1, j, w) {
                        buf.push(data[(r * h + window.input_index(0, i, q)) * w + window.input_index(1, j, t)]);
                    }
                }
                out.push(f(&buf));
            }
        }
    }
    Ok(out)
}

/// Evaluates single output elements of a conv or linear layer, one at a time,
/// against caller-supplied weights (real or dequantized).
pub(crate) struct WeightedEval<'a> {
    layer: &'a Layer,
    weights: &'a [f64],
    in_dims: [usize; 3],
    out_hw: (usize, usize),
}

impl<'a> WeightedEval<'a> {
    pub fn new(layer: &'a Layer, input: &Shape, weights: &'a [f64]) -> Result<Self> {
        layer.output_shape(input)?;
        let (in_dims, out_hw) = match layer {
            Layer::Conv2d { window, .. } => {
                let (c, h, w) = dims3(input)?;
                ([c, h, w], window.output_hw(h, w)?)
            }
            Layer::Linear { .. } => ([input.dims()[0], 1, 1], (1, 1)),
            _ => return Err(Error::InvalidConfig(format!("{} has no weights", layer.kind()))),
        };
        Ok(WeightedEval { layer, weights, in_dims, out_hw })
    }

    /// Output channel of flat output index `o`.
    pub fn channel_of(&self, o: usize) -> usize {
        o / (self.out_hw.0 * self.out_hw.1)
    }

    /// Bias-inclusive pre-activation at flat output index `o`.
    pub fn at(&self, x: &[f64], o: usize) -> f64 {
        let v = self.channel_of(o);
        let bias = self.layer.bias().map_or(0.0, |b| b[v]);
        match self.layer {
            Layer::Linear { .. } => {
                let d = self.in_dims[0];
                let row = &self.weights[v * d..(v + 1) * d];
                row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>() + bias
            }
            Layer::Conv2d { window, .. } => {
                let [c, h, w] = self.in_dims;
                let (kh, kw) = (window.kernel[0], window.kernel[1]);
                let rem = o % (self.out_hw.0 * self.out_hw.1);
                let (i, j) = (rem / self.out_hw.1, rem % self.out_hw.1);
                let rows = window.taps_in_bounds(0, i, h);
                let cols = window.taps_in_bounds(1, j, w);
                let mut acc = 0.0;
                for r in 0..c {
                    let wbase = (v * c + r) * kh;
                    for q in rows.clone() {
                        let xrow = (r * h + window.input_index(0, i, q)) * w;
                        let wrow = (wbase + q) * kw;
                        for t in cols.clone() {
                            acc += self.weights[wrow + t] * x[xrow + window.input_index(1, j, t)];
                        }
                    }
                }
                acc + bias
            }
            _ => unreachable!("checked in WeightedEval::new"),
        }
    }
}
