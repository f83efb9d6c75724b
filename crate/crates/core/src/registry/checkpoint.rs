use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::container::{read_container, write_container, FormatError, Reader};
use crate::engine::{BatchNorm2d, Conv2d, Dense, Layer, Model, Pool2d, Precision, Scalar, Tensor};

/// Limits applied to topology descriptors read from disk.
const MAX_DIM: usize = 1 << 20;
const MAX_ELEMENTS: usize = 1 << 31;

/// Serializable snapshot of a ChaCha8 generator position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

impl Default for RngState {
    fn default() -> Self {
        Self::capture(&ChaCha8Rng::seed_from_u64(0))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub model: Model<F>,
    pub epoch: u64,
    pub rng: RngState,
}

/// A checkpoint of either precision, as read from disk.
#[derive(Clone, Debug)]
pub enum AnyCheckpoint {
    F32(Checkpoint<f32>),
    F64(Checkpoint<f64>),
}

impl AnyCheckpoint {
    pub fn precision(&self) -> Precision {
        match self {
            AnyCheckpoint::F32(_) => Precision::F32,
            AnyCheckpoint::F64(_) => Precision::F64,
        }
    }
}

/// Conversion from [`AnyCheckpoint`] to a concrete precision.
pub trait FromAnyCheckpoint: Scalar {
    fn from_any(ck: AnyCheckpoint) -> Option<Checkpoint<Self>>;
    fn into_any(ck: Checkpoint<Self>) -> AnyCheckpoint;
}

impl FromAnyCheckpoint for f32 {
    fn from_any(ck: AnyCheckpoint) -> Option<Checkpoint<Self>> {
        match ck {
            AnyCheckpoint::F32(c) => Some(c),
            AnyCheckpoint::F64(_) => None,
        }
    }
    fn into_any(ck: Checkpoint<Self>) -> AnyCheckpoint {
        AnyCheckpoint::F32(ck)
    }
}

impl FromAnyCheckpoint for f64 {
    fn from_any(ck: AnyCheckpoint) -> Option<Checkpoint<Self>> {
        match ck {
            AnyCheckpoint::F64(c) => Some(c),
            AnyCheckpoint::F32(_) => None,
        }
    }
    fn into_any(ck: Checkpoint<Self>) -> AnyCheckpoint {
        AnyCheckpoint::F64(ck)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}: checkpoint precision {found:?} does not match requested {wanted:?}")]
    PrecisionMismatch {
        path: PathBuf,
        found: Precision,
        wanted: Precision,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        fan_in: usize,
        fan_out: usize,
        bias: bool,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Avgpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
    Batchnorm2d {
        channels: usize,
        eps: f64,
        momentum: f64,
    },
    SoftmaxXent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Topology {
    pub precision: Precision,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub epoch: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Descriptor {
    Checkpoint(Topology),
}

fn layer_spec<F: Scalar>(layer: &Layer<F>) -> LayerSpec {
    match layer {
        Layer::Dense(d) => LayerSpec::Dense {
            fan_in: d.weight.shape()[1],
            fan_out: d.weight.shape()[0],
            bias: d.bias.is_some(),
        },
        Layer::Conv2d(c) => LayerSpec::Conv2d {
            c_in: c.weight.shape()[1],
            c_out: c.weight.shape()[0],
            kernel: c.weight.shape()[2],
            stride: c.stride,
            padding: c.padding,
            bias: c.bias.is_some(),
        },
        Layer::Relu => LayerSpec::Relu,
        Layer::MaxPool2d(p) => LayerSpec::Maxpool2d {
            window: p.window,
            stride: p.stride,
        },
        Layer::AvgPool2d(p) => LayerSpec::Avgpool2d {
            window: p.window,
            stride: p.stride,
        },
        Layer::Flatten => LayerSpec::Flatten,
        Layer::BatchNorm2d(b) => LayerSpec::Batchnorm2d {
            channels: b.gamma.len(),
            eps: b.eps,
            momentum: b.momentum,
        },
        Layer::SoftmaxXent => LayerSpec::SoftmaxXent,
    }
}

/// Tensors stored for a layer, in payload order.
fn layer_tensors<F: Scalar>(layer: &Layer<F>) -> Vec<&Tensor<F>> {
    match layer {
        Layer::Dense(Dense { weight, bias }) | Layer::Conv2d(Conv2d { weight, bias, .. }) => {
            std::iter::once(weight).chain(bias.iter()).collect()
        }
        Layer::BatchNorm2d(b) => vec![&b.gamma, &b.beta, &b.running_mean, &b.running_var],
        _ => Vec::new(),
    }
}

/// Tensor shapes a layer spec requires, in payload order.
fn spec_shapes(spec: &LayerSpec) -> Result<Vec<Vec<usize>>, FormatError> {
    let check = |dims: &[usize]| -> Result<(), FormatError> {
        if dims.iter().any(|&d| d == 0 || d > MAX_DIM) {
            return Err(FormatError::Descriptor(format!(
                "layer dimension out of range in {spec:?}"
            )));
        }
        Ok(())
    };
    Ok(match *spec {
        LayerSpec::Dense {
            fan_in,
            fan_out,
            bias,
        } => {
            check(&[fan_in, fan_out])?;
            let mut v = vec![vec![fan_out, fan_in]];
            if bias {
                v.push(vec![fan_out]);
            }
            v
        }
        LayerSpec::Conv2d {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            bias,
        } => {
            check(&[c_in, c_out, kernel, stride])?;
            if padding > MAX_DIM {
                return Err(FormatError::Descriptor(
                    "conv2d padding out of range".into(),
                ));
            }
            let mut v = vec![vec![c_out, c_in, kernel, kernel]];
            if bias {
                v.push(vec![c_out]);
            }
            v
        }
        LayerSpec::Maxpool2d { window, stride } | LayerSpec::Avgpool2d { window, stride } => {
            check(&[window, stride])?;
            Vec::new()
        }
        LayerSpec::Batchnorm2d { channels, .. } => {
            check(&[channels])?;
            vec![vec![channels]; 4]
        }
        LayerSpec::Relu | LayerSpec::Flatten | LayerSpec::SoftmaxXent => Vec::new(),
    })
}

fn build_layer<F: Scalar>(spec: &LayerSpec, mut tensors: Vec<Tensor<F>>) -> Layer<F> {
    match *spec {
        LayerSpec::Dense { bias, .. } => {
            let b = bias.then(|| tensors.pop().expect("bias"));
            Layer::Dense(Dense {
                weight: tensors.pop().expect("weight"),
                bias: b,
            })
        }
        LayerSpec::Conv2d {
            stride,
            padding,
            bias,
            ..
        } => {
            let b = bias.then(|| tensors.pop().expect("bias"));
            Layer::Conv2d(Conv2d {
                weight: tensors.pop().expect("weight"),
                bias: b,
                stride,
                padding,
            })
        }
        LayerSpec::Relu => Layer::Relu,
        LayerSpec::Maxpool2d { window, stride } => Layer::MaxPool2d(Pool2d { window, stride }),
        LayerSpec::Avgpool2d { window, stride } => Layer::AvgPool2d(Pool2d { window, stride }),
        LayerSpec::Flatten => Layer::Flatten,
        LayerSpec::Batchnorm2d { eps, momentum, .. } => {
            let running_var = tensors.pop().expect("running_var");
            let running_mean = tensors.pop().expect("running_mean");
            let beta = tensors.pop().expect("beta");
            let gamma = tensors.pop().expect("gamma");
            Layer::BatchNorm2d(BatchNorm2d {
                gamma,
                beta,
                running_mean,
                running_var,
                eps,
                momentum,
            })
        }
        LayerSpec::SoftmaxXent => Layer::SoftmaxXent,
    }
}

/// Describes a model's topology without its parameters.
pub fn topology_of<F: Scalar>(model: &Model<F>) -> (Vec<usize>, Vec<LayerSpec>) {
    (
        model.input_shape().to_vec(),
        model.layers().iter().map(layer_spec).collect(),
    )
}

pub fn encode_checkpoint<F: Scalar>(ck: &Checkpoint<F>) -> Vec<u8> {
    let (input_shape, layers) = topology_of(&ck.model);
    let descriptor = Descriptor::Checkpoint(Topology {
        precision: F::PRECISION,
        input_shape,
        layers,
        epoch: ck.epoch,
        rng: ck.rng,
    });
    let json = serde_json::to_vec(&descriptor).expect("descriptor serializes");
    let mut payload = Vec::with_capacity(ck.model.param_count() * F::PRECISION.bytes());
    for layer in ck.model.layers() {
        for t in layer_tensors(layer) {
            for &v in t.data() {
                v.write_le(&mut payload);
            }
        }
    }
    write_container(&json, &payload)
}

fn read_tensors<F: Scalar>(
    reader: &mut Reader<'_>,
    topo: &Topology,
) -> Result<Model<F>, FormatError> {
    if topo.input_shape.is_empty()
        || topo.input_shape.len() > 4
        || topo.input_shape.iter().any(|&d| d == 0 || d > MAX_DIM)
    {
        return Err(FormatError::Descriptor(format!(
            "input shape {:?} out of range",
            topo.input_shape
        )));
    }
    topo.input_shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= MAX_ELEMENTS)
        .ok_or_else(|| FormatError::Descriptor("input shape too large".into()))?;
    let mut layers = Vec::with_capacity(topo.layers.len());
    for spec in &topo.layers {
        let shapes = spec_shapes(spec)?;
        let mut tensors = Vec::with_capacity(shapes.len());
        for shape in shapes {
            let count = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| FormatError::Descriptor(format!("tensor {shape:?} too large")))?;
            let bytes = count
                .checked_mul(F::PRECISION.bytes())
                .ok_or_else(|| FormatError::Descriptor("tensor too large".into()))?;
            let raw = reader.take(bytes)?;
            let data = raw
                .chunks_exact(F::PRECISION.bytes())
                .map(F::read_le)
                .collect();
            tensors
                .push(Tensor::new(shape, data).map_err(|e| FormatError::Corrupt(e.to_string()))?);
        }
        layers.push(build_layer(spec, tensors));
    }
    reader.finish()?;
    Model::new(topo.input_shape.clone(), layers).map_err(|e| FormatError::Descriptor(e.to_string()))
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<AnyCheckpoint, FormatError> {
    let (descriptor, mut reader) = read_container(bytes)?;
    let descriptor: Descriptor =
        serde_json::from_slice(descriptor).map_err(|e| FormatError::Descriptor(e.to_string()))?;
    let Descriptor::Checkpoint(topo) = descriptor;
    Ok(match topo.precision {
        Precision::F32 => AnyCheckpoint::F32(Checkpoint {
            model: read_tensors::<f32>(&mut reader, &topo)?,
            epoch: topo.epoch,
            rng: topo.rng,
        }),
        Precision::F64 => AnyCheckpoint::F64(Checkpoint {
            model: read_tensors::<f64>(&mut reader, &topo)?,
            epoch: topo.epoch,
            rng: topo.rng,
        }),
    })
}

pub fn save_checkpoint<F: Scalar>(ck: &Checkpoint<F>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<AnyCheckpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes).map_err(|source| CheckpointError::Format {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a checkpoint and requires it to hold precision `F`.
pub fn load_checkpoint_as<F: FromAnyCheckpoint>(
    path: &Path,
) -> Result<Checkpoint<F>, CheckpointError> {
    let any = load_checkpoint(path)?;
    let found = any.precision();
    F::from_any(any).ok_or_else(|| CheckpointError::PrecisionMismatch {
        path: path.to_path_buf(),
        found,
        wanted: F::PRECISION,
    })
}
