use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Values are rounded to binary32, the storage precision of dataset files, so
/// a dataset and its saved form are identical.
fn to_f32(t: Tensor) -> Result<Tensor> {
    t.map(|v| v as f32 as f64)
}

/// Labelled samples sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: Shape,
    samples: Vec<Tensor>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(shape: Shape, samples: Vec<Tensor>, labels: Vec<u16>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples for {} labels",
                samples.len(),
                labels.len()
            )));
        }
        if let Some(bad) = samples.iter().find(|s| s.shape() != &shape) {
            return Err(Error::ShapeMismatch(format!(
                "sample shape {} differs from dataset shape {shape}",
                bad.shape()
            )));
        }
        let samples = samples.into_iter().map(to_f32).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { shape, samples, labels })
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Tensor] {
        &self.samples
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Tensor, u16)> {
        self.samples.iter().zip(self.labels.iter().copied())
    }

    /// The first `n` samples (all of them if fewer).
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            shape: self.shape.clone(),
            samples: self.samples[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
        }
    }

    pub fn select(&self, indices: &[usize]) -> Result<Dataset> {
        if let Some(&i) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::ShapeMismatch(format!("sample index {i} out of {}", self.len())));
        }
        Ok(Dataset {
            shape: self.shape.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        })
    }

    /// `n` distinct samples drawn without replacement, reproducible from
    /// `seed`.
    pub fn random_subset(&self, n: usize, seed: u64) -> Result<Dataset> {
        if n > self.len() {
            return Err(Error::InvalidConfig(format!("subset of {n} from {} samples", self.len())));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.select(&rand::seq::index::sample(&mut rng, self.len(), n).into_vec())
    }

    /// Applies `f(index, sample)` to every sample; the shape must be kept.
    pub fn map_samples(&self, f: impl Fn(usize, &Tensor) -> Result<Tensor>) -> Result<Dataset> {
        let samples = self
            .samples
            .iter()
            .enumerate()
            .map(|(i, s)| f(i, s))
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(self.shape.clone(), samples, self.labels.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_subset_is_distinct_and_seeded() {
        let shape = Shape::new([1]).unwrap();
        let samples = (0..50).map(|i| Tensor::from_vec(shape.clone(), vec![i as f64]).unwrap()).collect();
        let d = Dataset::new(shape, samples, (0..50).collect()).unwrap();
        let a = d.random_subset(20, 9).unwrap();
        let mut labels = a.labels().to_vec();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 20);
        assert_eq!(a, d.random_subset(20, 9).unwrap());
        assert_ne!(a, d.random_subset(20, 10).unwrap());
        assert!(d.random_subset(51, 0).is_err());
    }
}
