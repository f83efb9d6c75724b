use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::Precision;
use crate::selection::PolicyTag;

/// Environment variable naming the dataset root used for relative paths.
pub const DATA_DIR_ENV: &str = "NEUROSELECT_DATA_DIR";

/// Full description of one pretraining or fine-tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pretrain_data: Option<DataSource>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune_data: Option<DataSource>,
    pub policy: PolicyTag,
    pub budget: Budget,
    pub epochs: usize,
    #[serde(default)]
    pub warmup_epochs: usize,
    pub lr_max: f64,
    #[serde(default = "default_mu_eq")]
    pub mu_eq: f64,
    /// Threshold policy only.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_eval_subset")]
    pub eval_subset: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default = "default_precision")]
    pub precision: Precision,
    /// Mask used before velocities exist.
    #[serde(default)]
    pub first_epoch: FirstEpoch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_scheme: Option<PathBuf>,
    /// Keep adding neurons that fit after the first budget overflow.
    #[serde(default)]
    pub fill: bool,
    #[serde(default = "default_true")]
    pub pin_classifier: bool,
    /// Re-initialize the classifier before fine-tuning.
    #[serde(default)]
    pub reset_classifier: bool,
    /// Write wall-clock seconds into the metrics CSV (makes it non-reproducible).
    #[serde(default)]
    pub wall_time_in_csv: bool,
    /// Write every epoch's output snapshot next to the metrics.
    #[serde(default)]
    pub dump_snapshots: bool,
}

fn default_mu_eq() -> f64 {
    0.5
}
fn default_eval_subset() -> usize {
    256
}
fn default_batch_size() -> usize {
    64
}
fn default_val_fraction() -> f64 {
    0.1
}
fn default_precision() -> Precision {
    Precision::F32
}
fn default_true() -> bool {
    true
}

/// Seeds for weight init, data order and selection. A bare integer sets all three.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "SeedsRepr")]
pub struct Seeds {
    pub weights: u64,
    pub data: u64,
    pub selection: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum SeedsRepr {
    One(u64),
    Each(SeedFields),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedFields {
    #[serde(default)]
    weights: u64,
    #[serde(default)]
    data: u64,
    #[serde(default)]
    selection: u64,
}

impl From<SeedsRepr> for Seeds {
    fn from(r: SeedsRepr) -> Self {
        match r {
            SeedsRepr::One(s) => Seeds::all(s),
            SeedsRepr::Each(f) => Seeds {
                weights: f.weights,
                data: f.data,
                selection: f.selection,
            },
        }
    }
}

impl Seeds {
    pub fn all(seed: u64) -> Self {
        Self {
            weights: seed,
            data: seed,
            selection: seed,
        }
    }

    pub fn label(&self) -> String {
        if self.weights == self.data && self.data == self.selection {
            format!("s{}", self.weights)
        } else {
            format!("s{}-{}-{}", self.weights, self.data, self.selection)
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstEpoch {
    #[default]
    Random,
    Static,
    None,
}

/// Maximum number of parameters updated per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Budget {
    /// Fraction of all trainable parameters, rounded down.
    Fraction(f64),
    Params(u64),
}

impl Budget {
    pub fn resolve(&self, total_params: u64) -> u64 {
        match *self {
            Budget::Fraction(f) => (f * total_params as f64).floor() as u64,
            Budget::Params(p) => p,
        }
    }

    pub fn label(&self) -> String {
        match self {
            Budget::Fraction(f) => format!("f{f}"),
            Budget::Params(p) => format!("p{p}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    Checkpoint(PathBuf),
    Fresh(ModelSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    /// conv3x3 → [bn] → relu → maxpool2, twice, then dense → relu → dense.
    SmallCnn {
        channels: [usize; 2],
        hidden: usize,
        #[serde(default)]
        batchnorm: bool,
    },
    /// flatten → (dense → relu)* → dense.
    Mlp { hidden: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        /// Keep only these classes, relabelled `0..n` in list order.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        classes: Option<Vec<usize>>,
    },
    Blobs {
        classes: usize,
        dims: usize,
        samples_per_class: usize,
        separation: f64,
        seed: u64,
        #[serde(default = "default_test_fraction")]
        test_fraction: f64,
    },
}

fn default_test_fraction() -> f64 {
    0.2
}

/// Resolves a relative data path: as given if it exists, otherwise under `$NEUROSELECT_DATA_DIR`.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_DIR_ENV) {
        Some(root) => PathBuf::from(root).join(path),
        None => path.to_path_buf(),
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Checks the invariants that do not need the model or the data.
    pub fn validate(&self) -> Result<(), String> {
        if self.epochs == 0 {
            return Err("epochs must be >= 1".into());
        }
        if self.warmup_epochs >= self.epochs {
            return Err(format!(
                "warmup_epochs ({}) must be < epochs ({})",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.lr_max > 0.0 && self.lr_max.is_finite()) {
            return Err(format!("lr_max must be > 0, got {}", self.lr_max));
        }
        if !(0.0..1.0).contains(&self.mu_eq) {
            return Err(format!("mu_eq must be in [0, 1), got {}", self.mu_eq));
        }
        if !(self.epsilon >= 0.0) {
            return Err(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if self.batch_size == 0 || self.eval_subset == 0 {
            return Err("batch_size and eval_subset must be >= 1".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            ));
        }
        if let Budget::Fraction(f) = self.budget {
            if !(0.0..=1.0).contains(&f) {
                return Err(format!("budget fraction must be in [0, 1], got {f}"));
            }
        }
        let needs_scheme = self.policy == PolicyTag::Static
            || (self.first_epoch == FirstEpoch::Static
                && matches!(
                    self.policy,
                    PolicyTag::Velocity | PolicyTag::Reweighted | PolicyTag::Threshold
                ));
        if needs_scheme && self.static_scheme.is_none() {
            return Err("static_scheme is required by this policy / first_epoch".into());
        }
        Ok(())
    }

    /// Artifact tag embedding policy, budget and seeds.
    pub fn tag(&self) -> String {
        format!(
            "{}_b{}_{}",
            self.policy,
            self.budget.label(),
            self.seeds.label()
        )
    }
}
