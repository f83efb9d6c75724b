use super::{EngineError, GradientBundle, Layer, Model, Scalar};
use crate::selection::NeuronUpdate;

/// Plain SGD (no momentum, no weight decay): `p <- p - lr * g` for every updated neuron.
///
/// Parameters and batch-norm running statistics of frozen neurons are not
/// touched. `lr == 0` leaves the model unchanged, running statistics included.
pub fn sgd_step<F: Scalar>(
    model: &mut Model<F>,
    bundle: &GradientBundle<F>,
    lr: f64,
) -> Result<(), EngineError> {
    if !lr.is_finite() || lr < 0.0 {
        return Err(EngineError::InvalidLearningRate(lr));
    }
    if !bundle.mask_applied() {
        return Err(EngineError::MaskNotApplied);
    }
    if bundle.layers().len() != model.len() {
        return Err(EngineError::Topology(format!(
            "gradient bundle holds {} layers, model has {}",
            bundle.layers().len(),
            model.len()
        )));
    }
    if lr == 0.0 {
        return Ok(());
    }
    let step = F::from_f64(lr);
    for index in 0..model.len() {
        let updates = &bundle.updates()[index];
        if updates.iter().all(|&u| u == NeuronUpdate::Frozen) {
            continue;
        }
        let grads = bundle.layer(index);
        let layer = model.layer_mut(index);
        let block = layer.weight_block();
        if let (Some(w), Some(g)) = (layer.weight_mut(), grads.weight.as_ref()) {
            let (w, g) = (w.data_mut(), g.data());
            for (c, &u) in updates.iter().enumerate() {
                if u == NeuronUpdate::Full {
                    for i in c * block..(c + 1) * block {
                        w[i] = w[i] - step * g[i];
                    }
                }
            }
        }
        if let (Some(b), Some(g)) = (layer.bias_mut(), grads.bias.as_ref()) {
            let (b, g) = (b.data_mut(), g.data());
            for (c, &u) in updates.iter().enumerate() {
                if u != NeuronUpdate::Frozen {
                    b[c] = b[c] - step * g[c];
                }
            }
        }
        if let (Layer::BatchNorm2d(bn), Some(stats)) = (layer, bundle.bn_stats(index)) {
            let momentum = F::from_f64(bn.momentum);
            let keep = F::one() - momentum;
            let unbias = if stats.count > 1 {
                F::from_f64(stats.count as f64 / (stats.count - 1) as f64)
            } else {
                F::one()
            };
            for (c, &u) in updates.iter().enumerate() {
                if u == NeuronUpdate::Frozen {
                    continue;
                }
                let rm = &mut bn.running_mean.data_mut()[c];
                *rm = keep * *rm + momentum * stats.mean[c];
                let rv = &mut bn.running_var.data_mut()[c];
                *rv = keep * *rv + momentum * stats.var[c] * unbias;
            }
        }
    }
    Ok(())
}
