//! Dense tensors and a reverse-mode engine for chain networks with per-neuron
//! gradient masking.

mod backward;
mod forward;
mod layer;
mod loss;
mod model;
mod optim;
mod tensor;

pub use backward::{
    backward, layer_updates, BackwardTrace, BnBatchStats, GradientBundle, ParamGrads, WgradEvent,
};
pub use forward::{forward, ForwardCache, Mode, OutputSink};
pub use layer::{
    init_batchnorm2d, init_conv2d, init_dense, BatchNorm2d, Conv2d, Dense, Layer, LayerKind, Pool2d,
};
pub use loss::{argmax_rows, softmax_xent};
pub use model::Model;
pub use optim::sgd_step;
pub use tensor::{Precision, Scalar, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("invalid tensor shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch at layer {layer}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        layer: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("layer {layer} cannot take input {input:?}: {reason}")]
    LayerShape {
        layer: usize,
        input: Vec<usize>,
        reason: String,
    },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("mask references neuron {id}, model has {count} neurons")]
    UnknownNeuron { id: usize, count: usize },
    #[error("neuron {0} marked bias-only but its layer has no bias")]
    BiasOnlyWithoutBias(usize),
    #[error("learning rate must be finite and non-negative, got {0}")]
    InvalidLearningRate(f64),
    #[error("gradient bundle was not mask-applied")]
    MaskNotApplied,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

#[cfg(test)]
mod tests;
