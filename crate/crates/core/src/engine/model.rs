use super::{EngineError, Layer, Precision, Scalar};

/// A simple chain of layers applied to per-sample inputs of `input_shape`.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F> {
    input_shape: Vec<usize>,
    layers: Vec<Layer<F>>,
    /// `shapes[l]` is the per-sample input shape of layer `l`; the last entry is the output shape.
    shapes: Vec<Vec<usize>>,
}

impl<F: Scalar> Model<F> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer<F>>) -> Result<Self, EngineError> {
        let shapes = infer_shapes(&input_shape, &layers)?;
        Ok(Self {
            input_shape,
            layers,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        self.shapes.last().expect("at least the input shape")
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    /// Mutable access to layer parameters. The topology itself cannot change.
    pub fn layer_mut(&mut self, index: usize) -> &mut Layer<F> {
        &mut self.layers[index]
    }

    /// Per-sample input shape of layer `index` (or the output shape when `index == len`).
    pub fn shape_at(&self, index: usize) -> &[usize] {
        &self.shapes[index]
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn precision(&self) -> Precision {
        F::PRECISION
    }

    /// Index of the last layer that owns neurons (the classifier in a standard chain).
    pub fn classifier_index(&self) -> Option<usize> {
        self.layers.iter().rposition(|l| l.neuron_count() > 0)
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            input_shape: self.input_shape.clone(),
            layers: self.layers.iter().map(Layer::cast).collect(),
            shapes: self.shapes.clone(),
        }
    }

    /// True when every parameter and running statistic is bitwise identical.
    pub fn bit_eq(&self, other: &Self) -> bool {
        if self.input_shape != other.input_shape || self.layers.len() != other.layers.len() {
            return false;
        }
        self.layers
            .iter()
            .zip(&other.layers)
            .all(|(a, b)| match (a, b) {
                (Layer::Dense(x), Layer::Dense(y)) => {
                    x.weight.bit_eq(&y.weight) && opt_bit_eq(&x.bias, &y.bias)
                }
                (Layer::Conv2d(x), Layer::Conv2d(y)) => {
                    x.stride == y.stride
                        && x.padding == y.padding
                        && x.weight.bit_eq(&y.weight)
                        && opt_bit_eq(&x.bias, &y.bias)
                }
                (Layer::BatchNorm2d(x), Layer::BatchNorm2d(y)) => {
                    x.eps.to_bits() == y.eps.to_bits()
                        && x.momentum.to_bits() == y.momentum.to_bits()
                        && x.gamma.bit_eq(&y.gamma)
                        && x.beta.bit_eq(&y.beta)
                        && x.running_mean.bit_eq(&y.running_mean)
                        && x.running_var.bit_eq(&y.running_var)
                }
                (a, b) => a == b,
            })
    }
}

fn opt_bit_eq<F: Scalar>(a: &Option<super::Tensor<F>>, b: &Option<super::Tensor<F>>) -> bool {
    match (a, b) {
        (Some(a), Some(b)) => a.bit_eq(b),
        (None, None) => true,
        _ => false,
    }
}

fn infer_shapes<F: Scalar>(
    input_shape: &[usize],
    layers: &[Layer<F>],
) -> Result<Vec<Vec<usize>>, EngineError> {
    if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
        return Err(EngineError::InvalidShape(input_shape.to_vec()));
    }
    let mut shapes = vec![input_shape.to_vec()];
    for (index, layer) in layers.iter().enumerate() {
        if matches!(layer, Layer::SoftmaxXent) && index + 1 != layers.len() {
            return Err(EngineError::Topology(format!(
                "softmax_xent must be the last layer (found at {index})"
            )));
        }
        check_params(index, layer)?;
        let current = shapes.last().expect("non-empty");
        let next = layer
            .output_shape(current)
            .map_err(|reason| EngineError::LayerShape {
                layer: index,
                input: current.clone(),
                reason,
            })?;
        shapes.push(next);
    }
    Ok(shapes)
}

fn check_params<F: Scalar>(index: usize, layer: &Layer<F>) -> Result<(), EngineError> {
    let bad = |reason: String| EngineError::Topology(format!("layer {index}: {reason}"));
    match layer {
        Layer::Dense(d) => {
            if d.weight.shape().len() != 2 {
                return Err(bad("dense weight must be [fan_out, fan_in]".into()));
            }
            if let Some(b) = &d.bias {
                if b.shape() != [d.weight.shape()[0]] {
                    return Err(bad("dense bias must be [fan_out]".into()));
                }
            }
        }
        Layer::Conv2d(c) => {
            let s = c.weight.shape();
            if s.len() != 4 || s[2] != s[3] {
                return Err(bad("conv2d weight must be [C_out, C_in, k, k]".into()));
            }
            if c.stride == 0 {
                return Err(bad("conv2d stride must be positive".into()));
            }
            if let Some(b) = &c.bias {
                if b.shape() != [s[0]] {
                    return Err(bad("conv2d bias must be [C_out]".into()));
                }
            }
        }
        Layer::MaxPool2d(p) | Layer::AvgPool2d(p) => {
            if p.window == 0 || p.stride == 0 {
                return Err(bad("pool window and stride must be positive".into()));
            }
        }
        Layer::BatchNorm2d(b) => {
            let c = b.gamma.len();
            let all = [&b.gamma, &b.beta, &b.running_mean, &b.running_var];
            if all.iter().any(|t| t.shape() != [c]) {
                return Err(bad("batchnorm2d tensors must all be [C]".into()));
            }
            if !(b.eps > 0.0 && b.eps.is_finite()) || !(0.0..=1.0).contains(&b.momentum) {
                return Err(bad(
                    "batchnorm2d eps must be > 0 and momentum in [0, 1]".into()
                ));
            }
        }
        Layer::Relu | Layer::Flatten | Layer::SoftmaxXent => {}
    }
    Ok(())
}
