//! Turning velocities, randomness or a static scheme into per-epoch update masks.

mod mask;
mod scheme;

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use mask::{NeuronUpdate, PolicyTag, UpdateMask};
pub use scheme::{materialize_static, ChannelRatio, StaticScheme};

use crate::velocity::{self, VelocityError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SelectionError {
    #[error("budget {budget} is below the pinned cost {pinned}")]
    BudgetBelowPinned { budget: u64, pinned: u64 },
    #[error("static mask costs {cost}, above the budget {budget}")]
    StaticOverBudget { cost: u64, budget: u64 },
    #[error("neuron {id} out of range for {count} neurons")]
    UnknownNeuron { id: usize, count: usize },
    #[error("neuron {0} listed both as trainable and bias-only")]
    Overlap(usize),
    #[error("velocity policy at epoch {0} has no velocities and no first-epoch fallback")]
    NoVelocity(usize),
    #[error("{given} velocities for {neurons} neurons")]
    VelocityLength { given: usize, neurons: usize },
    #[error("static scheme does not fit the model: {0}")]
    SchemeMismatch(String),
    #[error("static scheme line {line}: {message}")]
    SchemeParse { line: usize, message: String },
    #[error("{path}: {message}")]
    SchemeIo { path: PathBuf, message: String },
    #[error(transparent)]
    Velocity(#[from] VelocityError),
}

/// Ranking key for velocity-based selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankMode {
    /// `|v_i|`
    Raw,
    /// `|v_i / C_i|`
    Reweighted,
}

/// Neuron ids sorted by descending ranking key; ties go to the lower id.
pub fn rank(velocity: &[f64], costs: &[u64], mode: RankMode) -> Vec<usize> {
    let keys: Vec<f64> = match mode {
        RankMode::Raw => velocity.iter().map(|v| v.abs()).collect(),
        RankMode::Reweighted => velocity::reweight(velocity, costs)
            .iter()
            .map(|v| v.abs())
            .collect(),
    };
    let mut order: Vec<usize> = (0..velocity.len()).collect();
    order.sort_by(|&a, &b| keys[b].total_cmp(&keys[a]).then(a.cmp(&b)));
    order
}

/// Pinned neurons first, then the longest prefix of `order` that fits in `budget`.
///
/// With `fill` off, selection stops at the first neuron that would overflow
/// the budget. With `fill` on, the walk continues and adds every later neuron
/// that still fits.
pub fn select_budget_prefix(
    order: &[usize],
    costs: &[u64],
    budget: u64,
    pinned: &BTreeSet<usize>,
    fill: bool,
) -> Result<UpdateMask, SelectionError> {
    let count = costs.len();
    if let Some(&id) = order.iter().chain(pinned).find(|&&id| id >= count) {
        return Err(SelectionError::UnknownNeuron { id, count });
    }
    let pinned_cost: u64 = pinned.iter().map(|&i| costs[i]).sum();
    if pinned_cost > budget {
        return Err(SelectionError::BudgetBelowPinned {
            budget,
            pinned: pinned_cost,
        });
    }
    let mut chosen = pinned.clone();
    let mut spent = pinned_cost;
    for &id in order {
        if pinned.contains(&id) {
            continue;
        }
        if spent + costs[id] <= budget {
            spent += costs[id];
            chosen.insert(id);
        } else if !fill {
            break;
        }
    }
    UpdateMask::new(0, PolicyTag::Velocity, chosen, BTreeSet::new(), costs)
}

/// Uniformly random order of the non-pinned neurons (seeded shuffle), then the prefix rule.
pub fn select_random(
    costs: &[u64],
    budget: u64,
    pinned: &BTreeSet<usize>,
    seed: u64,
    fill: bool,
) -> Result<UpdateMask, SelectionError> {
    let mut order: Vec<usize> = (0..costs.len()).filter(|i| !pinned.contains(i)).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(select_budget_prefix(&order, costs, budget, pinned, fill)?.with_policy(PolicyTag::Random))
}

/// Seed source for selection randomness; each epoch draws from its own stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionRng {
    seed: u64,
}

impl SelectionRng {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed_for_epoch(&self, epoch: usize) -> u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch as u64);
        rng.next_u64()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Policy {
    Velocity,
    Reweighted,
    Random,
    Static(UpdateMask),
    Full,
    Threshold { epsilon: f64 },
}

impl Policy {
    pub fn tag(&self) -> PolicyTag {
        match self {
            Policy::Velocity => PolicyTag::Velocity,
            Policy::Reweighted => PolicyTag::Reweighted,
            Policy::Random => PolicyTag::Random,
            Policy::Static(_) => PolicyTag::Static,
            Policy::Full => PolicyTag::Full,
            Policy::Threshold { .. } => PolicyTag::Threshold,
        }
    }

    fn needs_velocity(&self) -> bool {
        matches!(
            self,
            Policy::Velocity | Policy::Reweighted | Policy::Threshold { .. }
        )
    }
}

/// Mask used by velocity-driven policies before any velocity exists.
#[derive(Clone, Debug, PartialEq)]
pub enum Fallback {
    None,
    Random,
    Static(UpdateMask),
}

/// Everything needed to pick the mask for each epoch.
#[derive(Clone, Debug)]
pub struct Selector {
    policy: Policy,
    fallback: Fallback,
    costs: Vec<u64>,
    budget: u64,
    pinned: BTreeSet<usize>,
    fill: bool,
    rng: SelectionRng,
}

impl Selector {
    pub fn new(
        policy: Policy,
        fallback: Fallback,
        costs: Vec<u64>,
        budget: u64,
        pinned: BTreeSet<usize>,
        fill: bool,
        rng: SelectionRng,
    ) -> Result<Self, SelectionError> {
        let count = costs.len();
        if let Some(&id) = pinned.iter().find(|&&id| id >= count) {
            return Err(SelectionError::UnknownNeuron { id, count });
        }
        let pinned_cost: u64 = pinned.iter().map(|&i| costs[i]).sum();
        if policy.tag().is_budgeted() && pinned_cost > budget {
            return Err(SelectionError::BudgetBelowPinned {
                budget,
                pinned: pinned_cost,
            });
        }
        for mask in [&policy_static(&policy), &fallback_static(&fallback)]
            .into_iter()
            .flatten()
        {
            if mask.max_id().is_some_and(|id| id >= count) {
                return Err(SelectionError::UnknownNeuron {
                    id: mask.max_id().unwrap_or(0),
                    count,
                });
            }
            if mask.total_cost() > budget {
                return Err(SelectionError::StaticOverBudget {
                    cost: mask.total_cost(),
                    budget,
                });
            }
        }
        Ok(Self {
            policy,
            fallback,
            costs,
            budget,
            pinned,
            fill,
            rng,
        })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn budget(&self) -> u64 {
        self.budget
    }

    pub fn pinned(&self) -> &BTreeSet<usize> {
        &self.pinned
    }

    pub fn costs(&self) -> &[u64] {
        &self.costs
    }

    pub fn rng(&self) -> SelectionRng {
        self.rng
    }

    /// Mask for `epoch` (1-based) given the latest velocities, if any.
    pub fn next_mask(
        &self,
        epoch: usize,
        velocity: Option<&[f64]>,
    ) -> Result<UpdateMask, SelectionError> {
        if let Some(v) = velocity {
            if v.len() != self.costs.len() {
                return Err(SelectionError::VelocityLength {
                    given: v.len(),
                    neurons: self.costs.len(),
                });
            }
        }
        let tag = self.policy.tag();
        let mask = match (&self.policy, velocity) {
            (Policy::Full, _) => UpdateMask::full(epoch, &self.costs),
            (Policy::Static(mask), _) => mask.clone(),
            (Policy::Random, _) => self.random(epoch)?,
            (p, None) if p.needs_velocity() => match &self.fallback {
                Fallback::Random => self.random(epoch)?,
                Fallback::Static(mask) => mask.clone(),
                Fallback::None => return Err(SelectionError::NoVelocity(epoch)),
            },
            (Policy::Velocity, Some(v)) => {
                let order = rank(v, &self.costs, RankMode::Raw);
                select_budget_prefix(&order, &self.costs, self.budget, &self.pinned, self.fill)?
            }
            (Policy::Reweighted, Some(v)) => {
                let order = rank(v, &self.costs, RankMode::Reweighted);
                select_budget_prefix(&order, &self.costs, self.budget, &self.pinned, self.fill)?
            }
            (Policy::Threshold { epsilon }, Some(v)) => {
                let frozen = velocity::threshold_equilibrium(v, *epsilon)?;
                let trainable = (0..self.costs.len())
                    .filter(|i| !frozen.contains(i) || self.pinned.contains(i))
                    .collect();
                UpdateMask::new(epoch, tag, trainable, BTreeSet::new(), &self.costs)?
            }
            (Policy::Velocity | Policy::Reweighted | Policy::Threshold { .. }, None) => {
                unreachable!("handled by the fallback arm")
            }
        };
        Ok(mask.with_epoch(epoch).with_policy(tag))
    }

    fn random(&self, epoch: usize) -> Result<UpdateMask, SelectionError> {
        select_random(
            &self.costs,
            self.budget,
            &self.pinned,
            self.rng.seed_for_epoch(epoch),
            self.fill,
        )
    }
}

fn policy_static(p: &Policy) -> Option<UpdateMask> {
    match p {
        Policy::Static(m) => Some(m.clone()),
        _ => None,
    }
}

fn fallback_static(f: &Fallback) -> Option<UpdateMask> {
    match f {
        Fallback::Static(m) => Some(m.clone()),
        _ => None,
    }
}
