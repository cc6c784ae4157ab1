//! Dense real-valued tensors.
//!
//! Data is stored row-major in binary64. Image-like tensors use CHW layout for
//! a single sample (the batch axis is implicit: every forward pass handles one
//! sample); a 4-D tensor is read as NCHW. The channel axis used by per-channel
//! quantization is always axis 0 for weights and single-sample activations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tensor dimensions. Every dimension is at least 1.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape(dims.clone()))?;
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Size of axis 0 and the number of elements in each axis-0 slice.
    pub fn channel_blocks(&self) -> (usize, usize) {
        let c = self.0[0];
        (c, self.numel() / c)
    }
}

impl TryFrom<Vec<usize>> for Shape {
    type Error = Error;
    fn try_from(dims: Vec<usize>) -> Result<Self> {
        Shape::new(dims)
    }
}

impl From<Shape> for Vec<usize> {
    fn from(s: Shape) -> Self {
        s.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|d| d.to_string()).collect();
        write!(f, "({})", parts.join(", "))
    }
}

/// Dense tensor of finite binary64 values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Vec<f64>,
}

/// Summary statistics over all elements of a tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElementStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    /// Population variance.
    pub var: f64,
}

impl Tensor {
    pub fn zeros(shape: Shape) -> Self {
        let data = vec![0.0; shape.numel()];
        Tensor { shape, data }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        Ok(Tensor { shape, data })
    }

    /// Convenience constructor for tests and fixtures.
    pub fn from_dims(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        Tensor::from_vec(Shape::new(dims.to_vec())?, data)
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Applies `f` elementwise, rejecting non-finite results.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Tensor::from_vec(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Slice of axis 0 at `index`, as a flat view.
    pub fn channel(&self, index: usize) -> &[f64] {
        let (_, block) = self.shape.channel_blocks();
        &self.data[index * block..(index + 1) * block]
    }

    pub fn elementwise_stats(&self) -> Result<ElementStats> {
        stats_of(&self.data)
    }
}

/// Exact min/max, arithmetic mean and population variance of a slice.
pub fn stats_of(values: &[f64]) -> Result<ElementStats> {
    if values.is_empty() {
        return Err(Error::Empty("statistics of an empty tensor"));
    }
    let n = values.len() as f64;
    let (mut min, mut max, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for &v in values {
        min = min.min(v);
        max = max.max(v);
        sum += v;
    }
    let mean = sum / n;
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok(ElementStats { min, max, mean, var })
}
