use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::engine::{Model, Scalar};

/// One selectable unit: an output channel/unit together with the parameters it owns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeuronDescriptor {
    pub id: usize,
    pub layer_index: usize,
    pub channel_index: usize,
    /// Number of scalar parameters owned (weights plus bias).
    pub param_cost: u64,
}

/// Lists neurons layer-major, channel-ascending. Parameterless layers contribute none.
pub fn enumerate_neurons<F: Scalar>(model: &Model<F>) -> Vec<NeuronDescriptor> {
    let mut out = Vec::new();
    for (layer_index, layer) in model.layers().iter().enumerate() {
        let cost = (layer.weight_block() + usize::from(layer.has_bias())) as u64;
        for channel_index in 0..layer.neuron_count() {
            out.push(NeuronDescriptor {
                id: out.len(),
                layer_index,
                channel_index,
                param_cost: cost,
            });
        }
    }
    out
}

/// Neuron descriptors with per-layer id ranges.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeuronTable {
    neurons: Vec<NeuronDescriptor>,
    costs: Vec<u64>,
    layer_ranges: Vec<Range<usize>>,
    classifier: Option<usize>,
}

impl NeuronTable {
    pub fn from_model<F: Scalar>(model: &Model<F>) -> Self {
        let neurons = enumerate_neurons(model);
        let costs = neurons.iter().map(|n| n.param_cost).collect();
        let mut layer_ranges = Vec::with_capacity(model.len());
        let mut next = 0;
        for layer in model.layers() {
            let n = layer.neuron_count();
            layer_ranges.push(next..next + n);
            next += n;
        }
        Self {
            neurons,
            costs,
            layer_ranges,
            classifier: model.classifier_index(),
        }
    }

    pub fn neurons(&self) -> &[NeuronDescriptor] {
        &self.neurons
    }

    /// Parameter cost per neuron id.
    pub fn costs(&self) -> &[u64] {
        &self.costs
    }

    pub fn len(&self) -> usize {
        self.neurons.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neurons.is_empty()
    }

    pub fn total_cost(&self) -> u64 {
        self.costs.iter().sum()
    }

    pub fn layer_count(&self) -> usize {
        self.layer_ranges.len()
    }

    /// Ids of the neurons owned by chain layer `layer`.
    pub fn layer_range(&self, layer: usize) -> Range<usize> {
        self.layer_ranges[layer].clone()
    }

    pub fn classifier_layer(&self) -> Option<usize> {
        self.classifier
    }

    /// Neurons of the last neuron-owning layer.
    pub fn classifier_ids(&self) -> Range<usize> {
        self.classifier.map_or(0..0, |l| self.layer_range(l))
    }
}
