//! The fine-tuning loop: mask selection, masked training, velocity tracking and metrics.

mod config;
mod metrics;
mod run;
mod schedule;

use rand::Rng;
use thiserror::Error;

pub use config::{
    resolve_data_path, Budget, DataSource, FirstEpoch, ModelSource, ModelSpec, RunConfig, Seeds,
    DATA_DIR_ENV,
};
pub use metrics::{read_metrics, write_metrics, EpochRecord, RunSummary, METRICS_HEADER};
pub use run::{
    load_splits, run, run_finetune, run_pretrain, run_to_dir, write_artifacts, ArtifactPaths,
    Finetuner, RunOutput, Splits, Stage,
};
pub use schedule::cosine_lr;

use crate::costmodel::CostError;
use crate::data::{DataError, Dataset};
use crate::engine::{
    argmax_rows, forward, init_batchnorm2d, init_conv2d, init_dense, softmax_xent, EngineError,
    Layer, Mode, Model, Pool2d, Scalar,
};
use crate::registry::CheckpointError;
use crate::selection::SelectionError;
use crate::velocity::VelocityError;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("infeasible budget: {0}")]
    Budget(SelectionError),
    #[error("data unavailable: {0}")]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("model does not fit the data: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Selection(SelectionError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Velocity(#[from] VelocityError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error("{path}: {message}")]
    Io {
        path: std::path::PathBuf,
        message: String,
    },
}

impl From<SelectionError> for RunError {
    fn from(e: SelectionError) -> Self {
        match e {
            SelectionError::BudgetBelowPinned { .. } | SelectionError::StaticOverBudget { .. } => {
                RunError::Budget(e)
            }
            other => RunError::Selection(other),
        }
    }
}

/// Top-1 accuracy in inference mode.
pub fn evaluate<F: Scalar>(
    model: &Model<F>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64, RunError> {
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (logits, _) = forward(model, &dataset.batch::<F>(chunk), Mode::Eval, None)?;
        let labels = dataset.batch_labels(chunk);
        correct += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Mean cross-entropy in inference mode.
pub fn mean_loss<F: Scalar>(
    model: &Model<F>,
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64, RunError> {
    if dataset.is_empty() {
        return Err(DataError::Empty.into());
    }
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (logits, _) = forward(model, &dataset.batch::<F>(chunk), Mode::Eval, None)?;
        let (loss, _) = softmax_xent(&logits, &dataset.batch_labels(chunk))?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Builds a freshly initialized model for `[C, H, W]` inputs and `classes` outputs.
pub fn build_model<F: Scalar, R: Rng + ?Sized>(
    spec: &ModelSpec,
    input_shape: &[usize],
    classes: usize,
    rng: &mut R,
) -> Result<Model<F>, RunError> {
    let mut layers: Vec<Layer<F>> = Vec::new();
    match spec {
        ModelSpec::SmallCnn {
            channels,
            hidden,
            batchnorm,
        } => {
            let &[c, h, w] = input_shape else {
                return Err(RunError::Mismatch(format!(
                    "small_cnn needs [C, H, W] inputs, got {input_shape:?}"
                )));
            };
            if h < 4 || w < 4 {
                return Err(RunError::Mismatch(format!(
                    "small_cnn needs inputs of at least 4x4, got {h}x{w}"
                )));
            }
            let mut c_in = c;
            for &c_out in channels {
                layers.push(init_conv2d(rng, c_in, c_out, 3, 1, 1, !*batchnorm)?);
                if *batchnorm {
                    layers.push(init_batchnorm2d(c_out)?);
                }
                layers.push(Layer::Relu);
                layers.push(Layer::MaxPool2d(Pool2d {
                    window: 2,
                    stride: 2,
                }));
                c_in = c_out;
            }
            layers.push(Layer::Flatten);
            let flat = c_in * (h / 4) * (w / 4);
            layers.push(init_dense(rng, flat, *hidden, true)?);
            layers.push(Layer::Relu);
            layers.push(init_dense(rng, *hidden, classes, true)?);
        }
        ModelSpec::Mlp { hidden } => {
            layers.push(Layer::Flatten);
            let mut fan_in: usize = input_shape.iter().product();
            for &h in hidden {
                layers.push(init_dense(rng, fan_in, h, true)?);
                layers.push(Layer::Relu);
                fan_in = h;
            }
            layers.push(init_dense(rng, fan_in, classes, true)?);
        }
    }
    layers.push(Layer::SoftmaxXent);
    Ok(Model::new(input_shape.to_vec(), layers)?)
}

/// Replaces the classifier (last dense layer) with a fresh one of `classes` outputs.
pub fn reset_classifier<F: Scalar, R: Rng + ?Sized>(
    model: &Model<F>,
    classes: usize,
    rng: &mut R,
) -> Result<Model<F>, RunError> {
    let index = model
        .classifier_index()
        .ok_or_else(|| RunError::Mismatch("model has no classifier layer".into()))?;
    let mut layers = model.layers().to_vec();
    let Layer::Dense(d) = &layers[index] else {
        return Err(RunError::Mismatch(format!(
            "classifier layer {index} is not dense"
        )));
    };
    let (fan_in, bias) = (d.weight.shape()[1], d.bias.is_some());
    layers[index] = init_dense(rng, fan_in, classes, bias)?;
    Ok(Model::new(model.input_shape().to_vec(), layers)?)
}
