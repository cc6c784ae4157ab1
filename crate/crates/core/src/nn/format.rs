//! QMOD model files and QDS1 dataset files.
//!
//! Both start with one line of compact JSON (the header) terminated by `\n`,
//! followed by little-endian binary32 payload. QMOD offsets are byte offsets
//! from the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::Window2d;
use crate::nn::dataset::Dataset;
use crate::nn::layer::{Layer, PoolKind};
use crate::nn::model::ModelGraph;
use crate::tensor::{Shape, Tensor};

pub const QMOD_MAGIC: &str = "QMOD1";
pub const QDS_MAGIC: &str = "QDS1";

#[derive(Serialize, Deserialize)]
struct QmodHeader {
    magic: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    kind: String,
    geometry: Option<Window2d>,
    weight_offset: Option<u64>,
    weight_shape: Option<Vec<usize>>,
    bias_offset: Option<u64>,
}

#[derive(Serialize, Deserialize)]
struct QdsHeader {
    magic: String,
    count: usize,
    shape: Vec<usize>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn push_f32(blob: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

fn with_header<T: Serialize>(header: &T, blob: &[u8]) -> Vec<u8> {
    let mut out = serde_json::to_vec(header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(blob);
    out
}

fn split_header(bytes: &[u8]) -> Result<(&[u8], &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing header line".into()))?;
    Ok((&bytes[..nl], &bytes[nl + 1..]))
}

fn read_f32(blob: &[u8], offset: usize, count: usize) -> Result<Vec<f64>> {
    let end = count
        .checked_mul(4)
        .and_then(|n| n.checked_add(offset))
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| Error::Format(format!("{count} values at offset {offset} exceed the payload")))?;
    let values: Vec<f64> = blob[offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    Ok(values)
}

/// Canonical file bytes of a model.
pub fn encode_qmod(model: &ModelGraph) -> Vec<u8> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(model.layers().len());
    for layer in model.layers() {
        let mut entry = LayerEntry {
            kind: layer.kind().to_string(),
            geometry: layer.window().copied(),
            weight_offset: None,
            weight_shape: None,
            bias_offset: None,
        };
        if let Some(w) = layer.weight() {
            entry.weight_offset = Some(blob.len() as u64);
            entry.weight_shape = Some(w.dims().to_vec());
            push_f32(&mut blob, w.data());
        }
        if let Some(b) = layer.bias() {
            entry.bias_offset = Some(blob.len() as u64);
            push_f32(&mut blob, b);
        }
        entries.push(entry);
    }
    let header = QmodHeader {
        magic: QMOD_MAGIC.into(),
        input_shape: model.input_shape().dims().to_vec(),
        layers: entries,
    };
    with_header(&header, &blob)
}

/// Parses a model; its hash is the SHA-256 of `bytes`.
pub fn decode_qmod(bytes: &[u8]) -> Result<ModelGraph> {
    let (head, blob) = split_header(bytes)?;
    let header: QmodHeader = serde_json::from_slice(head)?;
    if header.magic != QMOD_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    let mut layers = Vec::with_capacity(header.layers.len());
    for (i, e) in header.layers.into_iter().enumerate() {
        let geometry = || e.geometry.ok_or_else(|| Error::Format(format!("layer {i} needs geometry")));
        let weight = || -> Result<Tensor> {
            let (off, dims) = e
                .weight_offset
                .zip(e.weight_shape.clone())
                .ok_or_else(|| Error::Format(format!("layer {i} needs weights")))?;
            let shape = Shape::new(dims)?;
            Tensor::from_vec(shape.clone(), read_f32(blob, off as usize, shape.numel())?)
        };
        let bias = |out: usize| -> Result<Option<Vec<f64>>> {
            e.bias_offset.map(|off| read_f32(blob, off as usize, out)).transpose()
        };
        let layer = match e.kind.as_str() {
            "conv2d" => {
                let w = weight()?;
                let b = bias(w.dims()[0])?;
                Layer::conv2d(w, b, geometry()?)?
            }
            "linear" => {
                let w = weight()?;
                let b = bias(w.dims()[0])?;
                Layer::linear(w, b)?
            }
            "relu" => Layer::Relu,
            "maxpool" => Layer::pool(PoolKind::Max, geometry()?)?,
            "avgpool" => Layer::pool(PoolKind::Avg, geometry()?)?,
            "flatten" => Layer::Flatten,
            other => return Err(Error::Format(format!("unknown layer kind {other:?}"))),
        };
        layers.push(layer);
    }
    ModelGraph::with_hash(Shape::new(header.input_shape)?, layers, sha256_hex(bytes))
}

pub fn load_qmod(path: impl AsRef<Path>) -> Result<ModelGraph> {
    decode_qmod(&std::fs::read(path)?)
}

pub fn save_qmod(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_qmod(model))?;
    Ok(())
}

pub fn encode_qds(data: &Dataset) -> Vec<u8> {
    let header = QdsHeader { magic: QDS_MAGIC.into(), count: data.len(), shape: data.shape().dims().to_vec() };
    let mut blob = Vec::with_capacity(data.len() * (data.shape().numel() * 4 + 2));
    for s in data.samples() {
        push_f32(&mut blob, s.data());
    }
    for &l in data.labels() {
        blob.extend_from_slice(&l.to_le_bytes());
    }
    with_header(&header, &blob)
}

pub fn decode_qds(bytes: &[u8]) -> Result<Dataset> {
    let (head, blob) = split_header(bytes)?;
    let header: QdsHeader = serde_json::from_slice(head)?;
    if header.magic != QDS_MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", header.magic)));
    }
    let shape = Shape::new(header.shape)?;
    let n = shape.numel();
    let expected = header.count * (n * 4 + 2);
    if blob.len() != expected {
        return Err(Error::Format(format!("payload is {} bytes, expected {expected}", blob.len())));
    }
    let samples = (0..header.count)
        .map(|i| Tensor::from_vec(shape.clone(), read_f32(blob, i * n * 4, n)?))
        .collect::<Result<Vec<_>>>()?;
    let labels = blob[header.count * n * 4..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    Dataset::new(shape, samples, labels)
}

pub fn load_qds(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_qds(&std::fs::read(path)?)
}

pub fn save_qds(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_qds(data))?;
    Ok(())
}
