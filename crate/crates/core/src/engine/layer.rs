use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EngineError, Scalar, Tensor};

/// Fully connected layer. `weight` is `[fan_out, fan_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
}

/// 2-D convolution over `[C, H, W]` inputs. `weight` is `[C_out, C_in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<F> {
    pub weight: Tensor<F>,
    pub bias: Option<Tensor<F>>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pool2d {
    pub window: usize,
    pub stride: usize,
}

/// Per-channel batch normalization over `[C, H, W]` inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<F> {
    Dense(Dense<F>),
    Conv2d(Conv2d<F>),
    Relu,
    MaxPool2d(Pool2d),
    AvgPool2d(Pool2d),
    Flatten,
    BatchNorm2d(BatchNorm2d<F>),
    /// Terminal marker: the chain's output are logits scored by softmax cross-entropy.
    SoftmaxXent,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Maxpool2d,
    Avgpool2d,
    Flatten,
    Batchnorm2d,
    SoftmaxXent,
}

impl<F: Scalar> Layer<F> {
    pub fn dense(weight: Tensor<F>, bias: Option<Tensor<F>>) -> Self {
        Layer::Dense(Dense { weight, bias })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Dense(_) => LayerKind::Dense,
            Layer::Conv2d(_) => LayerKind::Conv2d,
            Layer::Relu => LayerKind::Relu,
            Layer::MaxPool2d(_) => LayerKind::Maxpool2d,
            Layer::AvgPool2d(_) => LayerKind::Avgpool2d,
            Layer::Flatten => LayerKind::Flatten,
            Layer::BatchNorm2d(_) => LayerKind::Batchnorm2d,
            Layer::SoftmaxXent => LayerKind::SoftmaxXent,
        }
    }

    /// Number of selectable neurons (output channels/units) owned by this layer.
    pub fn neuron_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.shape()[0],
            Layer::Conv2d(c) => c.weight.shape()[0],
            Layer::BatchNorm2d(b) => b.gamma.len(),
            _ => 0,
        }
    }

    /// Weight tensor whose leading dimension indexes the owning neuron.
    /// For batch norm this is `gamma`.
    pub fn weight(&self) -> Option<&Tensor<F>> {
        match self {
            Layer::Dense(d) => Some(&d.weight),
            Layer::Conv2d(c) => Some(&c.weight),
            Layer::BatchNorm2d(b) => Some(&b.gamma),
            _ => None,
        }
    }

    pub fn weight_mut(&mut self) -> Option<&mut Tensor<F>> {
        match self {
            Layer::Dense(d) => Some(&mut d.weight),
            Layer::Conv2d(c) => Some(&mut c.weight),
            Layer::BatchNorm2d(b) => Some(&mut b.gamma),
            _ => None,
        }
    }

    /// Per-neuron bias vector. For batch norm this is `beta`.
    pub fn bias(&self) -> Option<&Tensor<F>> {
        match self {
            Layer::Dense(d) => d.bias.as_ref(),
            Layer::Conv2d(c) => c.bias.as_ref(),
            Layer::BatchNorm2d(b) => Some(&b.beta),
            _ => None,
        }
    }

    pub fn bias_mut(&mut self) -> Option<&mut Tensor<F>> {
        match self {
            Layer::Dense(d) => d.bias.as_mut(),
            Layer::Conv2d(c) => c.bias.as_mut(),
            Layer::BatchNorm2d(b) => Some(&mut b.beta),
            _ => None,
        }
    }

    pub fn has_bias(&self) -> bool {
        self.bias().is_some()
    }

    /// Number of weight scalars owned by each neuron.
    pub fn weight_block(&self) -> usize {
        match self.weight() {
            Some(w) => w.len() / w.shape()[0],
            None => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.weight().map_or(0, |w| w.len()) + self.bias().map_or(0, |b| b.len())
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match self {
            Layer::Dense(d) => {
                let fan_in = d.weight.shape()[1];
                if input != [fan_in] {
                    return Err(format!("dense expects [{fan_in}]"));
                }
                Ok(vec![d.weight.shape()[0]])
            }
            Layer::Conv2d(c) => {
                let ws = c.weight.shape();
                let (c_out, c_in, k) = (ws[0], ws[1], ws[2]);
                if input.len() != 3 || input[0] != c_in {
                    return Err(format!("conv2d expects [{c_in}, H, W]"));
                }
                let h = conv_out(input[1], k, c.stride, c.padding)
                    .ok_or("conv2d kernel larger than padded input")?;
                let w = conv_out(input[2], k, c.stride, c.padding)
                    .ok_or("conv2d kernel larger than padded input")?;
                Ok(vec![c_out, h, w])
            }
            Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
                if input.len() != 3 {
                    return Err("pool expects [C, H, W]".into());
                }
                let h = conv_out(input[1], p.window, p.stride, 0).ok_or("pool window too large")?;
                let w = conv_out(input[2], p.window, p.stride, 0).ok_or("pool window too large")?;
                Ok(vec![input[0], h, w])
            }
            Layer::BatchNorm2d(b) => {
                if input.len() != 3 || input[0] != b.gamma.len() {
                    return Err(format!("batchnorm2d expects [{}, H, W]", b.gamma.len()));
                }
                Ok(input.to_vec())
            }
            Layer::Flatten => Ok(vec![input.iter().product()]),
            Layer::Relu | Layer::SoftmaxXent => Ok(input.to_vec()),
        }
    }

    pub fn cast<G: Scalar>(&self) -> Layer<G> {
        match self {
            Layer::Dense(d) => Layer::Dense(Dense {
                weight: d.weight.cast(),
                bias: d.bias.as_ref().map(Tensor::cast),
            }),
            Layer::Conv2d(c) => Layer::Conv2d(Conv2d {
                weight: c.weight.cast(),
                bias: c.bias.as_ref().map(Tensor::cast),
                stride: c.stride,
                padding: c.padding,
            }),
            Layer::Relu => Layer::Relu,
            Layer::MaxPool2d(p) => Layer::MaxPool2d(*p),
            Layer::AvgPool2d(p) => Layer::AvgPool2d(*p),
            Layer::Flatten => Layer::Flatten,
            Layer::BatchNorm2d(b) => Layer::BatchNorm2d(BatchNorm2d {
                gamma: b.gamma.cast(),
                beta: b.beta.cast(),
                running_mean: b.running_mean.cast(),
                running_var: b.running_var.cast(),
                eps: b.eps,
                momentum: b.momentum,
            }),
            Layer::SoftmaxXent => Layer::SoftmaxXent,
        }
    }
}

pub(crate) fn conv_out(size: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if k == 0 || stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn he_normal<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: Vec<usize>,
    fan_in: usize,
) -> Tensor<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| F::from_f64(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

/// He-initialized dense layer with zero bias.
pub fn init_dense<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) -> Result<Layer<F>, EngineError> {
    if fan_in == 0 || fan_out == 0 {
        return Err(EngineError::InvalidShape(vec![fan_out, fan_in]));
    }
    Ok(Layer::Dense(Dense {
        weight: he_normal(rng, vec![fan_out, fan_in], fan_in),
        bias: bias.then(|| Tensor::zeros(vec![fan_out])),
    }))
}

/// He-initialized square-kernel convolution with zero bias.
pub fn init_conv2d<F: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    c_in: usize,
    c_out: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    bias: bool,
) -> Result<Layer<F>, EngineError> {
    if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 {
        return Err(EngineError::InvalidShape(vec![c_out, c_in, kernel, kernel]));
    }
    Ok(Layer::Conv2d(Conv2d {
        weight: he_normal(
            rng,
            vec![c_out, c_in, kernel, kernel],
            c_in * kernel * kernel,
        ),
        bias: bias.then(|| Tensor::zeros(vec![c_out])),
        stride,
        padding,
    }))
}

pub fn init_batchnorm2d<F: Scalar>(channels: usize) -> Result<Layer<F>, EngineError> {
    if channels == 0 {
        return Err(EngineError::InvalidShape(vec![channels]));
    }
    Ok(Layer::BatchNorm2d(BatchNorm2d {
        gamma: Tensor::filled(vec![channels], F::one()),
        beta: Tensor::zeros(vec![channels]),
        running_mean: Tensor::zeros(vec![channels]),
        running_var: Tensor::filled(vec![channels], F::one()),
        eps: 1e-5,
        momentum: 0.1,
    }))
}
