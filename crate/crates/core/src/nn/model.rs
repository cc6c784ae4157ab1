use crate::error::{Error, Result};
use crate::nn::format;
use crate::nn::layer::Layer;
use crate::tensor::{Shape, Tensor};

/// A sequential model: one input, an ordered layer list, one output.
///
/// Weights are held at binary32 precision (the storage precision of the model
/// file) so an in-memory model and its saved form are identical.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    input_shape: Shape,
    layers: Vec<Layer>,
    shapes: Vec<Shape>,
    hash: String,
}

/// Outputs of every layer of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub outputs: Vec<Tensor>,
}

impl ForwardTrace {
    /// Pre-activation (layer output) of weighted layer `index`.
    pub fn preact(&self, index: usize) -> &Tensor {
        &self.outputs[index]
    }
}

impl ModelGraph {
    pub fn new(input_shape: Shape, layers: Vec<Layer>) -> Result<Self> {
        let layers: Vec<Layer> = layers.into_iter().map(round_to_f32).collect::<Result<_>>()?;
        let shapes = infer_shapes(&input_shape, &layers)?;
        let mut model = ModelGraph { input_shape, layers, shapes, hash: String::new() };
        model.hash = format::sha256_hex(&format::encode_qmod(&model));
        Ok(model)
    }

    /// Used by the loader, which hashes the file bytes as read.
    pub(crate) fn with_hash(input_shape: Shape, layers: Vec<Layer>, hash: String) -> Result<Self> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        Ok(ModelGraph { input_shape, layers, shapes, hash })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Output shape of layer `i`.
    pub fn output_shape(&self, i: usize) -> &Shape {
        &self.shapes[i]
    }

    /// Input shape of layer `i`.
    pub fn layer_input_shape(&self, i: usize) -> &Shape {
        if i == 0 {
            &self.input_shape
        } else {
            &self.shapes[i - 1]
        }
    }

    /// SHA-256 of the model file, hex encoded.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn weighted_layers(&self) -> impl Iterator<Item = (usize, &Layer)> {
        self.layers.iter().enumerate().filter(|(_, l)| l.is_weighted())
    }

    pub fn forward_float(&self, x: &Tensor) -> Result<(Tensor, ForwardTrace)> {
        if x.shape() != &self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "model input is {}, got {}",
                self.input_shape,
                x.shape()
            )));
        }
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = outputs.last().unwrap_or(x);
            outputs.push(layer.forward(input)?);
        }
        let out = outputs.last().cloned().unwrap_or_else(|| x.clone());
        Ok((out, ForwardTrace { outputs }))
    }
}

fn infer_shapes(input: &Shape, layers: &[Layer]) -> Result<Vec<Shape>> {
    let mut shapes: Vec<Shape> = Vec::with_capacity(layers.len());
    for (i, layer) in layers.iter().enumerate() {
        let prev = shapes.last().unwrap_or(input);
        let s = layer
            .output_shape(prev)
            .map_err(|e| Error::ShapeMismatch(format!("layer {i} ({}): {e}", layer.kind())))?;
        shapes.push(s);
    }
    Ok(shapes)
}

fn round_to_f32(layer: Layer) -> Result<Layer> {
    let round_t = |t: Tensor| t.map(|v| v as f32 as f64);
    let round_b = |b: Option<Vec<f64>>| b.map(|b| b.into_iter().map(|v| v as f32 as f64).collect());
    Ok(match layer {
        Layer::Conv2d { weight, bias, window } => Layer::Conv2d { weight: round_t(weight)?, bias: round_b(bias), window },
        Layer::Linear { weight, bias } => Layer::Linear { weight: round_t(weight)?, bias: round_b(bias) },
        other => other,
    })
}
