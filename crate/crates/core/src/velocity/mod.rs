//! Per-neuron output similarity across epochs and the velocities derived from it.
//!
//! Each epoch, every neuron's outputs over a fixed evaluation subset are
//! concatenated and unit-normalized. The cosine similarity `phi` against the
//! previous epoch, its change `delta_phi`, and the momentum-smoothed velocity
//! `v = delta_phi - mu_eq * v_prev` drive velocity-based selection.

mod dump;

use std::collections::BTreeSet;

use thiserror::Error;

pub use dump::{decode_snapshot, encode_snapshot, read_snapshot, write_snapshot};

use crate::data::Dataset;
use crate::engine::{forward, EngineError, Mode, Model, OutputSink, Scalar};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VelocityError {
    #[error("evaluation subset is empty")]
    EmptySubset,
    #[error("neuron {neuron}: output length {current} differs from previous {previous}")]
    LengthMismatch {
        neuron: usize,
        current: usize,
        previous: usize,
    },
    #[error("snapshots hold {current} and {previous} neurons")]
    NeuronCountMismatch { current: usize, previous: usize },
    #[error("momentum mu_eq must lie in [0, 1), got {0}")]
    InvalidMomentum(f64),
    #[error("threshold epsilon must be >= 0, got {0}")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Unit-normalized concatenated outputs of every neuron at one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct OutputSnapshot {
    pub epoch: usize,
    vectors: Vec<Vec<f64>>,
    raw_norms: Vec<f64>,
}

impl OutputSnapshot {
    /// Normalizes raw per-neuron outputs. All-zero outputs stay zero with norm 0.
    pub fn from_raw(epoch: usize, raw: Vec<Vec<f64>>) -> Self {
        let mut raw_norms = Vec::with_capacity(raw.len());
        let vectors = raw
            .into_iter()
            .map(|mut v| {
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                raw_norms.push(norm);
                if norm > 0.0 {
                    v.iter_mut().for_each(|x| *x /= norm);
                }
                v
            })
            .collect();
        Self {
            epoch,
            vectors,
            raw_norms,
        }
    }

    pub(crate) fn from_parts(epoch: usize, vectors: Vec<Vec<f64>>, raw_norms: Vec<f64>) -> Self {
        Self {
            epoch,
            vectors,
            raw_norms,
        }
    }

    pub fn neuron_count(&self) -> usize {
        self.vectors.len()
    }

    pub fn vector(&self, neuron: usize) -> &[f64] {
        &self.vectors[neuron]
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn raw_norm(&self, neuron: usize) -> f64 {
        self.raw_norms[neuron]
    }

    pub fn raw_norms(&self) -> &[f64] {
        &self.raw_norms
    }
}

/// Evaluates `model` (inference mode) over `subset` in order and snapshots every neuron's outputs.
pub fn capture<F: Scalar>(
    model: &Model<F>,
    subset: &Dataset,
    batch_size: usize,
    epoch: usize,
) -> Result<OutputSnapshot, VelocityError> {
    if subset.is_empty() {
        return Err(VelocityError::EmptySubset);
    }
    let mut sink = OutputSink::for_model(model);
    let indices: Vec<usize> = (0..subset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = subset.batch::<F>(chunk);
        forward(model, &batch, Mode::Eval, Some(&mut sink))?;
    }
    Ok(OutputSnapshot::from_raw(epoch, sink.into_outputs()))
}

/// Cosine similarity of each neuron's outputs between two epochs.
///
/// Both outputs dead gives 1, exactly one dead gives 0. Bitwise identical
/// vectors give exactly 1.
pub fn similarity(
    current: &OutputSnapshot,
    previous: &OutputSnapshot,
) -> Result<Vec<f64>, VelocityError> {
    if current.neuron_count() != previous.neuron_count() {
        return Err(VelocityError::NeuronCountMismatch {
            current: current.neuron_count(),
            previous: previous.neuron_count(),
        });
    }
    (0..current.neuron_count())
        .map(|i| {
            let (a, b) = (current.vector(i), previous.vector(i));
            if a.len() != b.len() {
                return Err(VelocityError::LengthMismatch {
                    neuron: i,
                    current: a.len(),
                    previous: b.len(),
                });
            }
            let dead = (current.raw_norm(i) == 0.0, previous.raw_norm(i) == 0.0);
            Ok(match dead {
                (true, true) => 1.0,
                (true, false) | (false, true) => 0.0,
                _ if a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) => 1.0,
                _ => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            })
        })
        .collect()
}

/// Previous similarity and velocity of every neuron.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityState {
    phi_prev: Vec<f64>,
    v_prev: Vec<f64>,
    mu_eq: f64,
    epoch: usize,
}

/// Result of advancing the velocity state by one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Advance {
    pub delta_phi: Vec<f64>,
    pub velocity: Vec<f64>,
    pub state: VelocityState,
}

impl VelocityState {
    /// Bootstrap state: `phi = 1` (unchanged model) and `v = 0` for every neuron.
    pub fn new(neurons: usize, mu_eq: f64) -> Result<Self, VelocityError> {
        if !(0.0..1.0).contains(&mu_eq) {
            return Err(VelocityError::InvalidMomentum(mu_eq));
        }
        Ok(Self {
            phi_prev: vec![1.0; neurons],
            v_prev: vec![0.0; neurons],
            mu_eq,
            epoch: 0,
        })
    }

    pub fn phi_prev(&self) -> &[f64] {
        &self.phi_prev
    }

    pub fn v_prev(&self) -> &[f64] {
        &self.v_prev
    }

    pub fn mu_eq(&self) -> f64 {
        self.mu_eq
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// `delta_phi = phi - phi_prev`, `v = delta_phi - mu_eq * v_prev`.
    pub fn advance(self, phi: &[f64]) -> Result<Advance, VelocityError> {
        if phi.len() != self.phi_prev.len() {
            return Err(VelocityError::NeuronCountMismatch {
                current: phi.len(),
                previous: self.phi_prev.len(),
            });
        }
        let delta_phi: Vec<f64> = phi.iter().zip(&self.phi_prev).map(|(p, q)| p - q).collect();
        let velocity: Vec<f64> = delta_phi
            .iter()
            .zip(&self.v_prev)
            .map(|(d, v)| d - self.mu_eq * v)
            .collect();
        let state = VelocityState {
            phi_prev: phi.to_vec(),
            v_prev: velocity.clone(),
            mu_eq: self.mu_eq,
            epoch: self.epoch + 1,
        };
        Ok(Advance {
            delta_phi,
            velocity,
            state,
        })
    }
}

/// Velocity per owned parameter.
pub fn reweight(velocity: &[f64], costs: &[u64]) -> Vec<f64> {
    velocity
        .iter()
        .zip(costs)
        .map(|(v, &c)| v / c as f64)
        .collect()
}

/// Neurons at equilibrium (`|v| < epsilon`), i.e. the ones to freeze.
pub fn threshold_equilibrium(
    velocity: &[f64],
    epsilon: f64,
) -> Result<BTreeSet<usize>, VelocityError> {
    if !(epsilon >= 0.0) {
        return Err(VelocityError::InvalidEpsilon(epsilon));
    }
    Ok(velocity
        .iter()
        .enumerate()
        .filter(|(_, v)| v.abs() < epsilon)
        .map(|(i, _)| i)
        .collect())
}

/// Quantities produced for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochVelocity {
    pub epoch: usize,
    pub phi: Vec<f64>,
    pub delta_phi: Vec<f64>,
    pub velocity: Vec<f64>,
}

/// Chains capture, similarity and advance across epochs.
#[derive(Clone, Debug)]
pub struct VelocityTracker {
    previous: OutputSnapshot,
    state: VelocityState,
    latest: Option<EpochVelocity>,
}

impl VelocityTracker {
    /// Starts from the snapshot of the unmodified (epoch 0) model.
    pub fn new(initial: OutputSnapshot, mu_eq: f64) -> Result<Self, VelocityError> {
        let state = VelocityState::new(initial.neuron_count(), mu_eq)?;
        Ok(Self {
            previous: initial,
            state,
            latest: None,
        })
    }

    pub fn observe(&mut self, snapshot: OutputSnapshot) -> Result<&EpochVelocity, VelocityError> {
        let phi = similarity(&snapshot, &self.previous)?;
        let Advance {
            delta_phi,
            velocity,
            state,
        } = self.state.clone().advance(&phi)?;
        self.state = state;
        let epoch = snapshot.epoch;
        self.previous = snapshot;
        Ok(self.latest.insert(EpochVelocity {
            epoch,
            phi,
            delta_phi,
            velocity,
        }))
    }

    /// Most recent velocities, if any epoch was observed.
    pub fn latest(&self) -> Option<&EpochVelocity> {
        self.latest.as_ref()
    }

    pub fn state(&self) -> &VelocityState {
        &self.state
    }

    pub fn previous_snapshot(&self) -> &OutputSnapshot {
        &self.previous
    }
}
