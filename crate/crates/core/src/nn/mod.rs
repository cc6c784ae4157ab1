//! Layers, sequential models, quantized execution and file formats.

pub mod dataset;
pub mod format;
pub mod layer;
pub mod model;
pub mod pipeline;

pub use dataset::Dataset;
pub use layer::{Layer, PoolKind};
pub use model::{ForwardTrace, ModelGraph};
pub use pipeline::{calibrate_and_evaluate, evaluate, evaluate_float, forward_quantized, EvalReport, ForwardMetrics, QuantizedModel};
