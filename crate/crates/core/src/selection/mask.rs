use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::SelectionError;

/// Which selection rule produced a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyTag {
    Velocity,
    Reweighted,
    Random,
    Static,
    Full,
    Threshold,
}

impl PolicyTag {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Velocity => "velocity",
            PolicyTag::Reweighted => "reweighted",
            PolicyTag::Random => "random",
            PolicyTag::Static => "static",
            PolicyTag::Full => "full",
            PolicyTag::Threshold => "threshold",
        }
    }

    /// Budgeted policies never emit a mask costing more than the budget.
    pub fn is_budgeted(self) -> bool {
        matches!(
            self,
            PolicyTag::Velocity | PolicyTag::Reweighted | PolicyTag::Random | PolicyTag::Static
        )
    }
}

impl std::fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "velocity" => PolicyTag::Velocity,
            "reweighted" => PolicyTag::Reweighted,
            "random" => PolicyTag::Random,
            "static" => PolicyTag::Static,
            "full" => PolicyTag::Full,
            "threshold" => PolicyTag::Threshold,
            other => return Err(format!("unknown policy {other:?}")),
        })
    }
}

/// How a single neuron is treated during one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NeuronUpdate {
    Frozen,
    /// Only the neuron's bias (or BN shift) is trained; costs one parameter.
    BiasOnly,
    Full,
}

/// The set of neurons whose parameters are updated during one epoch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateMask {
    epoch: usize,
    policy: PolicyTag,
    trainable: BTreeSet<usize>,
    bias_only: BTreeSet<usize>,
    total_cost: u64,
}

impl UpdateMask {
    /// Builds a mask and charges its cost from `costs` (indexed by neuron id).
    /// Bias-only neurons are charged one parameter each.
    pub fn new(
        epoch: usize,
        policy: PolicyTag,
        trainable: BTreeSet<usize>,
        bias_only: BTreeSet<usize>,
        costs: &[u64],
    ) -> Result<Self, SelectionError> {
        let count = costs.len();
        if let Some(&id) = trainable.iter().chain(&bias_only).find(|&&id| id >= count) {
            return Err(SelectionError::UnknownNeuron { id, count });
        }
        if let Some(&id) = trainable.intersection(&bias_only).next() {
            return Err(SelectionError::Overlap(id));
        }
        let total_cost = trainable.iter().map(|&i| costs[i]).sum::<u64>() + bias_only.len() as u64;
        Ok(Self {
            epoch,
            policy,
            trainable,
            bias_only,
            total_cost,
        })
    }

    pub fn full(epoch: usize, costs: &[u64]) -> Self {
        Self::new(
            epoch,
            PolicyTag::Full,
            (0..costs.len()).collect(),
            BTreeSet::new(),
            costs,
        )
        .expect("ids in range")
    }

    pub fn empty(epoch: usize, policy: PolicyTag) -> Self {
        Self {
            epoch,
            policy,
            trainable: BTreeSet::new(),
            bias_only: BTreeSet::new(),
            total_cost: 0,
        }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn policy(&self) -> PolicyTag {
        self.policy
    }

    pub fn with_epoch(mut self, epoch: usize) -> Self {
        self.epoch = epoch;
        self
    }

    pub fn with_policy(mut self, policy: PolicyTag) -> Self {
        self.policy = policy;
        self
    }

    /// Fully trainable neurons.
    pub fn trainable(&self) -> &BTreeSet<usize> {
        &self.trainable
    }

    pub fn bias_only(&self) -> &BTreeSet<usize> {
        &self.bias_only
    }

    pub fn total_cost(&self) -> u64 {
        self.total_cost
    }

    /// Number of neurons receiving any update.
    pub fn len(&self) -> usize {
        self.trainable.len() + self.bias_only.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn max_id(&self) -> Option<usize> {
        self.trainable
            .last()
            .copied()
            .max(self.bias_only.last().copied())
    }

    pub fn update_of(&self, id: usize) -> NeuronUpdate {
        if self.trainable.contains(&id) {
            NeuronUpdate::Full
        } else if self.bias_only.contains(&id) {
            NeuronUpdate::BiasOnly
        } else {
            NeuronUpdate::Frozen
        }
    }

    pub fn contains(&self, id: usize) -> bool {
        self.update_of(id) != NeuronUpdate::Frozen
    }

    /// Sorted ids of every neuron receiving an update.
    pub fn ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self
            .trainable
            .iter()
            .chain(&self.bias_only)
            .copied()
            .collect();
        ids.sort_unstable();
        ids
    }

    /// JSON array of updated neuron ids.
    pub fn to_json_ids(&self) -> String {
        serde_json::to_string(&self.ids()).expect("ids serialize")
    }

    /// Whether the mask members are the same, ignoring epoch and policy tag.
    pub fn same_members(&self, other: &Self) -> bool {
        self.trainable == other.trainable && self.bias_only == other.bias_only
    }
}
