//! FLOPs accounting for forward and (masked) backward passes.
//!
//! Conventions, all per sample:
//! - dense forward `2·fan_in·fan_out`, conv2d forward `2·k²·C_in·C_out·H_out·W_out`
//!   (bias additions are folded into the multiply-accumulate count);
//! - relu, pooling and batch-norm forward cost one FLOP per output element;
//!   flatten and the loss marker are free;
//! - weight gradient of one dense unit `2·fan_in + 1`, of one conv channel
//!   `2·k²·C_in·H_out·W_out + H_out·W_out`, of one BN channel `3·H·W`
//!   (`γ`: multiply-add per element, `β`: add per element); bias-only training
//!   charges only the bias term (`1`, `H_out·W_out`, `H·W`);
//! - input gradient of dense/conv equals its forward MAC count, relu and
//!   pooling charge one FLOP per input element, batch norm five per element.
//!
//! Bias terms are charged in the backward pass only; the forward formulas
//! follow the usual `2·MACs` convention.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::engine::{layer_updates, EngineError, Layer, Model, Scalar, WgradEvent};
use crate::selection::{NeuronUpdate, UpdateMask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("input shape {actual:?} does not match the model input {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Per-sample costs of one layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub forward_flops: u64,
    /// Weight-gradient FLOPs of one fully trained neuron.
    pub wgrad_flops_per_neuron: u64,
    /// Weight-gradient FLOPs of one bias-only neuron.
    pub bias_flops_per_neuron: u64,
    pub igrad_flops: u64,
    /// Parameters owned by each neuron.
    pub param_count: u64,
}

fn numel(shape: &[usize]) -> u64 {
    shape.iter().product::<usize>() as u64
}

fn check_input<F: Scalar>(model: &Model<F>, input_shape: &[usize]) -> Result<(), CostError> {
    if input_shape != model.input_shape() {
        return Err(CostError::ShapeMismatch {
            expected: model.input_shape().to_vec(),
            actual: input_shape.to_vec(),
        });
    }
    Ok(())
}

/// Cost table for every layer of the chain.
pub fn layer_costs<F: Scalar>(
    model: &Model<F>,
    input_shape: &[usize],
) -> Result<Vec<LayerCost>, CostError> {
    check_input(model, input_shape)?;
    Ok(model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let input = model.shape_at(l);
            let output = model.shape_at(l + 1);
            let (ins, outs) = (numel(input), numel(output));
            let param_count = (layer.weight_block() + usize::from(layer.has_bias())) as u64;
            match layer {
                Layer::Dense(d) => {
                    let (fan_out, fan_in) =
                        (d.weight.shape()[0] as u64, d.weight.shape()[1] as u64);
                    let bias = u64::from(d.bias.is_some());
                    LayerCost {
                        forward_flops: 2 * fan_in * fan_out,
                        wgrad_flops_per_neuron: 2 * fan_in + bias,
                        bias_flops_per_neuron: bias,
                        igrad_flops: 2 * fan_in * fan_out,
                        param_count,
                    }
                }
                Layer::Conv2d(c) => {
                    let s = c.weight.shape();
                    let (c_out, c_in, k) = (s[0] as u64, s[1] as u64, s[2] as u64);
                    let plane = (output[1] * output[2]) as u64;
                    let bias = if c.bias.is_some() { plane } else { 0 };
                    LayerCost {
                        forward_flops: 2 * k * k * c_in * c_out * plane,
                        wgrad_flops_per_neuron: 2 * k * k * c_in * plane + bias,
                        bias_flops_per_neuron: bias,
                        igrad_flops: 2 * k * k * c_in * c_out * plane,
                        param_count,
                    }
                }
                Layer::BatchNorm2d(_) => {
                    let plane = (input[1] * input[2]) as u64;
                    LayerCost {
                        forward_flops: outs,
                        wgrad_flops_per_neuron: 3 * plane,
                        bias_flops_per_neuron: plane,
                        igrad_flops: 5 * ins,
                        param_count,
                    }
                }
                Layer::Relu | Layer::MaxPool2d(_) | Layer::AvgPool2d(_) => LayerCost {
                    forward_flops: outs,
                    igrad_flops: ins,
                    ..LayerCost::default()
                },
                Layer::Flatten | Layer::SoftmaxXent => LayerCost::default(),
            }
        })
        .collect())
}

pub fn forward_flops<F: Scalar>(model: &Model<F>, input_shape: &[usize]) -> Result<u64, CostError> {
    Ok(layer_costs(model, input_shape)?
        .iter()
        .map(|c| c.forward_flops)
        .sum())
}

/// Work the backward pass is charged for under `mask`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BackwardCharges {
    pub wgrad: BTreeSet<WgradEvent>,
    pub igrad: BTreeSet<usize>,
    pub flops: u64,
}

/// Weight gradients for every updated neuron; input gradient of layer `l`
/// whenever an updated neuron exists in some layer before `l`.
pub fn backward_charges<F: Scalar>(
    model: &Model<F>,
    mask: &UpdateMask,
    input_shape: &[usize],
) -> Result<BackwardCharges, CostError> {
    let costs = layer_costs(model, input_shape)?;
    let updates = layer_updates(model, mask)?;
    let mut charges = BackwardCharges::default();
    let mut upstream = false;
    for (l, row) in updates.iter().enumerate() {
        if upstream {
            charges.igrad.insert(l);
            charges.flops += costs[l].igrad_flops;
        }
        for (channel, &u) in row.iter().enumerate() {
            match u {
                NeuronUpdate::Frozen => continue,
                NeuronUpdate::Full => charges.flops += costs[l].wgrad_flops_per_neuron,
                NeuronUpdate::BiasOnly => charges.flops += costs[l].bias_flops_per_neuron,
            }
            charges.wgrad.insert(WgradEvent {
                layer: l,
                channel,
                bias_only: u == NeuronUpdate::BiasOnly,
            });
            upstream = true;
        }
    }
    Ok(charges)
}

pub fn backward_flops<F: Scalar>(
    model: &Model<F>,
    mask: &UpdateMask,
    input_shape: &[usize],
) -> Result<u64, CostError> {
    Ok(backward_charges(model, mask, input_shape)?.flops)
}

/// `100·(1 − backward(mask)/backward(full))` for each mask.
pub fn flops_saved_percent<F: Scalar>(
    model: &Model<F>,
    masks: &[UpdateMask],
    input_shape: &[usize],
) -> Result<Vec<f64>, CostError> {
    let costs: Vec<u64> = crate::registry::enumerate_neurons(model)
        .iter()
        .map(|n| n.param_cost)
        .collect();
    let full = backward_flops(model, &UpdateMask::full(0, &costs), input_shape)?;
    masks
        .iter()
        .map(|m| {
            let used = backward_flops(model, m, input_shape)?;
            Ok(if full == 0 {
                0.0
            } else if used == full {
                0.0
            } else {
                100.0 * (1.0 - used as f64 / full as f64)
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{init_conv2d, init_dense, Layer};
    use crate::selection::PolicyTag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(0)
    }

    #[test]
    fn forward_examples() {
        let dense = Model::<f32>::new(vec![10], vec![init_dense(&mut rng(), 10, 3, true).unwrap()])
            .unwrap();
        assert_eq!(forward_flops(&dense, &[10]).unwrap(), 60);
        let relu = Model::<f32>::new(vec![100], vec![Layer::Relu]).unwrap();
        assert_eq!(forward_flops(&relu, &[100]).unwrap(), 100);
        let conv = Model::<f32>::new(
            vec![1, 4, 4],
            vec![init_conv2d(&mut rng(), 1, 2, 3, 1, 1, true).unwrap()],
        )
        .unwrap();
        assert_eq!(forward_flops(&conv, &[1, 4, 4]).unwrap(), 576);
        assert!(matches!(
            forward_flops(&conv, &[1, 5, 5]),
            Err(CostError::ShapeMismatch { .. })
        ));
    }

    fn toy() -> Model<f64> {
        let mut r = rng();
        Model::new(
            vec![4],
            vec![
                init_dense(&mut r, 4, 3, true).unwrap(),
                Layer::Relu,
                init_dense(&mut r, 3, 2, true).unwrap(),
                Layer::Relu,
                init_dense(&mut r, 2, 2, false).unwrap(),
            ],
        )
        .unwrap()
    }

    fn mask(costs: &[u64], ids: &[usize]) -> UpdateMask {
        UpdateMask::new(
            1,
            PolicyTag::Velocity,
            ids.iter().copied().collect(),
            BTreeSet::new(),
            costs,
        )
        .unwrap()
    }

    #[test]
    fn first_layer_only_charges_every_igrad_above_it() {
        let m = toy();
        let costs: Vec<u64> = crate::registry::enumerate_neurons(&m)
            .iter()
            .map(|n| n.param_cost)
            .collect();
        let c = backward_charges(&m, &mask(&costs, &[0, 2]), &[4]).unwrap();
        assert_eq!(c.igrad, [1, 2, 3, 4].into_iter().collect());
        assert_eq!(
            c.wgrad
                .iter()
                .map(|e| (e.layer, e.channel))
                .collect::<Vec<_>>(),
            vec![(0, 0), (0, 2)]
        );
        // wgrad 2·(2·4+1); igrad relu 3 + dense 2·3·2 + relu 2 + dense 2·2·2
        assert_eq!(c.flops, 18 + 3 + 12 + 2 + 8);
    }

    #[test]
    fn full_and_empty_masks() {
        let m = toy();
        let costs: Vec<u64> = crate::registry::enumerate_neurons(&m)
            .iter()
            .map(|n| n.param_cost)
            .collect();
        let empty = UpdateMask::empty(1, PolicyTag::Velocity);
        assert_eq!(backward_flops(&m, &empty, &[4]).unwrap(), 0);
        let saved = flops_saved_percent(&m, &[UpdateMask::full(1, &costs), empty], &[4]).unwrap();
        assert_eq!(saved, vec![0.0, 100.0]);
        // weight grads 3·9 + 2·7 + 2·4, igrad above layer 0: 3 + 12 + 2 + 8
        assert_eq!(
            backward_flops(&m, &UpdateMask::full(1, &costs), &[4]).unwrap(),
            27 + 14 + 8 + 25
        );
    }

    #[test]
    fn bias_only_charges_bias_term() {
        let m = toy();
        let costs: Vec<u64> = crate::registry::enumerate_neurons(&m)
            .iter()
            .map(|n| n.param_cost)
            .collect();
        let bias = UpdateMask::new(
            1,
            PolicyTag::Static,
            BTreeSet::new(),
            [3].into_iter().collect(),
            &costs,
        )
        .unwrap();
        let c = backward_charges(&m, &bias, &[4]).unwrap();
        assert_eq!(c.flops, 1 + 2 + 8);
        let s = flops_saved_percent(&m, &[bias], &[4]).unwrap()[0];
        assert!(s > 0.0 && s < 100.0);
    }
}
