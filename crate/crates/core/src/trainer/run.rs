use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{resolve_data_path, DataSource, FirstEpoch, ModelSource, RunConfig};
use super::metrics::{write_metrics, EpochRecord, RunSummary};
use super::schedule::cosine_lr;
use super::{build_model, evaluate, reset_classifier, RunError};
use crate::costmodel::flops_saved_percent;
use crate::data::{epoch_batches, load_idx, synth_blobs, Dataset};
use crate::engine::{backward, forward, sgd_step, softmax_xent, Mode, Model, Precision, Scalar};
use crate::registry::{
    load_checkpoint, save_checkpoint, AnyCheckpoint, Checkpoint, FromAnyCheckpoint, NeuronTable,
    RngState,
};
use crate::selection::{
    materialize_static, Fallback, Policy, PolicyTag, SelectionRng, Selector, StaticScheme,
    UpdateMask,
};
use crate::velocity::{capture, write_snapshot, VelocityTracker};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

/// Training data, the frozen evaluation subset carved from it, and the held-out test set.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub eval_subset: Dataset,
    pub test: Dataset,
}

/// Loads `source`, carves `val_fraction` of the training split off (seeded) and keeps
/// its first `eval_subset` samples for output capture.
pub fn load_splits(
    source: &DataSource,
    val_fraction: f64,
    eval_subset: usize,
    data_seed: u64,
) -> Result<Splits, RunError> {
    let (train, test) = match source {
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            classes,
        } => {
            let train = load_idx(
                &resolve_data_path(train_images),
                &resolve_data_path(train_labels),
            )?;
            let test = load_idx(
                &resolve_data_path(test_images),
                &resolve_data_path(test_labels),
            )?;
            if train.sample_shape() != test.sample_shape() {
                return Err(RunError::Mismatch(format!(
                    "train images are {:?}, test images {:?}",
                    train.sample_shape(),
                    test.sample_shape()
                )));
            }
            match classes {
                Some(list) => (train.select_classes(list)?, test.select_classes(list)?),
                None => {
                    let n = train.classes().max(test.classes());
                    (train.with_classes(n)?, test.with_classes(n)?)
                }
            }
        }
        DataSource::Blobs {
            classes,
            dims,
            samples_per_class,
            separation,
            seed,
            test_fraction,
        } => {
            let all = synth_blobs(*classes, *dims, *samples_per_class, *separation, *seed)?;
            let mut parts = all.split(&[1.0 - test_fraction, *test_fraction], *seed)?;
            let test = parts.pop().expect("two parts");
            (parts.pop().expect("two parts"), test)
        }
    };
    let mut parts = train.split(&[1.0 - val_fraction, val_fraction], data_seed)?;
    let val = parts.pop().expect("two parts");
    let train = parts.pop().expect("two parts");
    let keep: Vec<usize> = (0..eval_subset.min(val.len())).collect();
    Ok(Splits {
        train,
        eval_subset: val.subset(&keep)?,
        test,
    })
}

fn build_selector<F: Scalar>(
    config: &RunConfig,
    model: &Model<F>,
    table: &NeuronTable,
) -> Result<Selector, RunError> {
    let static_mask = |path: &Path| -> Result<UpdateMask, RunError> {
        Ok(materialize_static(&StaticScheme::load(path)?, model)?)
    };
    let policy = match config.policy {
        PolicyTag::Velocity => Policy::Velocity,
        PolicyTag::Reweighted => Policy::Reweighted,
        PolicyTag::Random => Policy::Random,
        PolicyTag::Full => Policy::Full,
        PolicyTag::Threshold => Policy::Threshold {
            epsilon: config.epsilon,
        },
        PolicyTag::Static => {
            let path = config
                .static_scheme
                .as_deref()
                .ok_or_else(|| RunError::Config("static policy needs static_scheme".into()))?;
            Policy::Static(static_mask(path)?)
        }
    };
    let velocity_driven = matches!(
        config.policy,
        PolicyTag::Velocity | PolicyTag::Reweighted | PolicyTag::Threshold
    );
    let fallback = match config.first_epoch {
        _ if !velocity_driven => Fallback::None,
        FirstEpoch::Random => Fallback::Random,
        FirstEpoch::None => Fallback::None,
        FirstEpoch::Static => {
            let path = config
                .static_scheme
                .as_deref()
                .ok_or_else(|| RunError::Config("first_epoch static needs static_scheme".into()))?;
            Fallback::Static(static_mask(path)?)
        }
    };
    let pinned: BTreeSet<usize> = if config.pin_classifier && config.policy != PolicyTag::Full {
        table.classifier_ids().collect()
    } else {
        BTreeSet::new()
    };
    Ok(Selector::new(
        policy,
        fallback,
        table.costs().to_vec(),
        config.budget.resolve(table.total_cost()),
        pinned,
        config.fill,
        SelectionRng::new(config.seeds.selection),
    )?)
}

/// Epoch-by-epoch driver of one run.
///
/// Each epoch picks a mask from the latest velocities, trains on every
/// mini-batch with the masked backward pass, then captures the evaluation
/// subset and advances the velocity state.
pub struct Finetuner<F: Scalar> {
    config: RunConfig,
    model: Model<F>,
    table: NeuronTable,
    selector: Selector,
    splits: Splits,
    tracker: Option<VelocityTracker>,
    epoch: usize,
    snapshot_dir: Option<PathBuf>,
    last_mask: Option<UpdateMask>,
}

impl<F: Scalar> Finetuner<F> {
    pub fn new(config: &RunConfig, model: Model<F>, splits: Splits) -> Result<Self, RunError> {
        Self::with_snapshot_dir(config, model, splits, None)
    }

    /// Like [`Finetuner::new`], also writing every captured snapshot to `dir`.
    pub fn with_snapshot_dir(
        config: &RunConfig,
        model: Model<F>,
        splits: Splits,
        dir: Option<PathBuf>,
    ) -> Result<Self, RunError> {
        config.validate().map_err(RunError::Config)?;
        if model.input_shape() != splits.train.sample_shape() {
            return Err(RunError::Mismatch(format!(
                "model input {:?}, data samples {:?}",
                model.input_shape(),
                splits.train.sample_shape()
            )));
        }
        if model.output_shape() != [splits.train.classes()] {
            return Err(RunError::Mismatch(format!(
                "model output {:?}, data has {} classes (set reset_classifier)",
                model.output_shape(),
                splits.train.classes()
            )));
        }
        let table = NeuronTable::from_model(&model);
        let selector = build_selector(config, &model, &table)?;
        let needs_velocity = matches!(
            config.policy,
            PolicyTag::Velocity | PolicyTag::Reweighted | PolicyTag::Threshold
        );
        if let Some(dir) = &dir {
            std::fs::create_dir_all(dir).map_err(|e| RunError::Io {
                path: dir.clone(),
                message: e.to_string(),
            })?;
        }
        let mut this = Self {
            config: config.clone(),
            model,
            table,
            selector,
            splits,
            tracker: None,
            epoch: 0,
            snapshot_dir: dir,
            last_mask: None,
        };
        if needs_velocity || this.snapshot_dir.is_some() {
            let initial = this.capture(0)?;
            this.tracker = Some(VelocityTracker::new(initial, config.mu_eq)?);
        }
        Ok(this)
    }

    fn capture(&self, epoch: usize) -> Result<crate::velocity::OutputSnapshot, RunError> {
        let snapshot = capture(
            &self.model,
            &self.splits.eval_subset,
            self.config.batch_size,
            epoch,
        )?;
        if let Some(dir) = &self.snapshot_dir {
            write_snapshot(&snapshot, &dir.join(format!("e{epoch:04}.nsel")))?;
        }
        Ok(snapshot)
    }

    pub fn model(&self) -> &Model<F> {
        &self.model
    }

    pub fn into_model(self) -> Model<F> {
        self.model
    }

    pub fn table(&self) -> &NeuronTable {
        &self.table
    }

    pub fn selector(&self) -> &Selector {
        &self.selector
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn tracker(&self) -> Option<&VelocityTracker> {
        self.tracker.as_ref()
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn budget(&self) -> u64 {
        self.selector.budget()
    }

    /// Mask used by the most recent epoch.
    pub fn last_mask(&self) -> Option<&UpdateMask> {
        self.last_mask.as_ref()
    }

    /// Runs the next epoch at the scheduled learning rate.
    pub fn run_epoch(&mut self) -> Result<EpochRecord, RunError> {
        let c = &self.config;
        let lr = cosine_lr(self.epoch, c.epochs, c.warmup_epochs, c.lr_max);
        self.run_epoch_with_lr(lr)
    }

    /// Runs the next epoch at an explicit learning rate.
    pub fn run_epoch_with_lr(&mut self, lr: f64) -> Result<EpochRecord, RunError> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let velocity = self
            .tracker
            .as_ref()
            .and_then(|t| t.latest())
            .map(|e| e.velocity.as_slice());
        let mask = self.selector.next_mask(epoch, velocity)?;

        let train = &self.splits.train;
        let mut loss_sum = 0.0;
        for batch in epoch_batches(
            train.len(),
            self.config.batch_size,
            self.config.seeds.data,
            epoch as u64,
        ) {
            let x = train.batch::<F>(&batch);
            let (logits, cache) = forward(&self.model, &x, Mode::Train, None)?;
            let (loss, grad) = softmax_xent(&logits, &train.batch_labels(&batch))?;
            let bundle = backward(&self.model, &cache, &grad, &mask)?;
            sgd_step(&mut self.model, &bundle, lr)?;
            loss_sum += loss * batch.len() as f64;
        }

        if self.tracker.is_some() {
            let snapshot = self.capture(epoch)?;
            self.tracker.as_mut().expect("checked").observe(snapshot)?;
        }
        let test_top1 = evaluate(&self.model, &self.splits.test, self.config.batch_size)?;
        let saved = flops_saved_percent(
            &self.model,
            std::slice::from_ref(&mask),
            self.model.input_shape(),
        )?[0];
        self.epoch = epoch;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            test_top1,
            policy: mask.policy(),
            mask_neurons: mask.len(),
            mask_cost: mask.total_cost(),
            budget: self.selector.budget(),
            flops_saved_pct: saved,
            seconds: Some(start.elapsed().as_secs_f64()),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.5} loss {:.4} top1 {:.4} mask {} neurons / {} params",
            record.train_loss,
            record.test_top1,
            record.mask_neurons,
            record.mask_cost
        );
        self.last_mask = Some(mask);
        Ok(record)
    }
}

/// Everything one run produces.
#[derive(Clone, Debug)]
pub struct RunOutput<F> {
    pub stage: Stage,
    pub records: Vec<EpochRecord>,
    pub summary: RunSummary,
    pub checkpoint: Checkpoint<F>,
}

fn initial_model<F: Scalar>(
    config: &RunConfig,
    splits: &Splits,
    rng: &mut ChaCha8Rng,
) -> Result<Model<F>, RunError> {
    let classes = splits.train.classes();
    let model = match &config.model {
        ModelSource::Checkpoint(path) => match load_checkpoint(path)? {
            AnyCheckpoint::F32(ck) => ck.model.cast::<F>(),
            AnyCheckpoint::F64(ck) => ck.model.cast::<F>(),
        },
        ModelSource::Fresh(spec) => build_model(spec, splits.train.sample_shape(), classes, rng)?,
    };
    if config.reset_classifier {
        reset_classifier(&model, classes, rng)
    } else {
        Ok(model)
    }
}

/// Runs every epoch of `stage`. Snapshots go to `snapshot_dir` when given.
pub fn run<F: Scalar>(
    config: &RunConfig,
    stage: Stage,
    snapshot_dir: Option<PathBuf>,
) -> Result<RunOutput<F>, RunError> {
    config.validate().map_err(RunError::Config)?;
    let source = match stage {
        Stage::Pretrain => config.pretrain_data.as_ref(),
        Stage::Finetune => config.finetune_data.as_ref(),
    }
    .ok_or_else(|| RunError::Config(format!("{stage} needs {stage}_data")))?;
    let splits = load_splits(
        source,
        config.val_fraction,
        config.eval_subset,
        config.seeds.data,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seeds.weights);
    let model = initial_model::<F>(config, &splits, &mut rng)?;

    let start = Instant::now();
    let mut tuner = Finetuner::with_snapshot_dir(config, model, splits, snapshot_dir)?;
    let mut records = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        records.push(tuner.run_epoch()?);
    }
    let total_seconds = start.elapsed().as_secs_f64();

    let table = tuner.table();
    let splits = tuner.splits();
    let last = records.last().expect("epochs >= 1");
    let summary = RunSummary {
        tag: config.tag(),
        stage: stage.to_string(),
        policy: config.policy,
        precision: F::PRECISION,
        total_params: table.total_cost(),
        neurons: table.len(),
        budget_params: tuner.budget(),
        pinned_cost: tuner
            .selector()
            .pinned()
            .iter()
            .map(|&i| table.costs()[i])
            .sum(),
        epochs: config.epochs,
        final_test_top1: last.test_top1,
        best_test_top1: records.iter().map(|r| r.test_top1).fold(f64::MIN, f64::max),
        mean_flops_saved_pct: records.iter().map(|r| r.flops_saved_pct).sum::<f64>()
            / records.len() as f64,
        train_samples: splits.train.len(),
        eval_subset_samples: splits.eval_subset.len(),
        test_samples: splits.test.len(),
        epoch_seconds: records.iter().map(|r| r.seconds.unwrap_or(0.0)).collect(),
        total_seconds,
        config: config.clone(),
    };
    Ok(RunOutput {
        stage,
        records,
        summary,
        checkpoint: Checkpoint {
            model: tuner.into_model(),
            epoch: config.epochs as u64,
            rng: RngState::capture(&rng),
        },
    })
}

pub fn run_pretrain<F: Scalar>(config: &RunConfig) -> Result<RunOutput<F>, RunError> {
    run(config, Stage::Pretrain, None)
}

pub fn run_finetune<F: Scalar>(config: &RunConfig) -> Result<RunOutput<F>, RunError> {
    run(config, Stage::Finetune, None)
}

/// Files written for one run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArtifactPaths {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub checkpoint: PathBuf,
}

impl ArtifactPaths {
    pub fn new(out_dir: &Path, stage: Stage, tag: &str) -> Self {
        Self {
            metrics: out_dir.join(format!("{stage}_{tag}_metrics.csv")),
            summary: out_dir.join(format!("{stage}_{tag}_summary.json")),
            checkpoint: out_dir.join(format!("{stage}_{tag}.nsel")),
        }
    }

    pub fn snapshot_dir(out_dir: &Path, stage: Stage, tag: &str) -> PathBuf {
        out_dir.join(format!("{stage}_{tag}_snapshots"))
    }
}

pub fn write_artifacts<F: Scalar>(
    out_dir: &Path,
    output: &RunOutput<F>,
) -> Result<ArtifactPaths, RunError> {
    std::fs::create_dir_all(out_dir).map_err(|e| RunError::Io {
        path: out_dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let paths = ArtifactPaths::new(out_dir, output.stage, &output.summary.tag);
    write_metrics(
        &paths.metrics,
        &output.records,
        output.summary.config.wall_time_in_csv,
    )?;
    let json = serde_json::to_string_pretty(&output.summary).expect("summary serializes");
    std::fs::write(&paths.summary, json + "\n").map_err(|e| RunError::Io {
        path: paths.summary.clone(),
        message: e.to_string(),
    })?;
    save_checkpoint(&output.checkpoint, &paths.checkpoint)?;
    Ok(paths)
}

fn run_and_write<F: FromAnyCheckpoint>(
    config: &RunConfig,
    stage: Stage,
    out_dir: &Path,
) -> Result<(RunSummary, ArtifactPaths), RunError> {
    let tag = config.tag();
    let snapshots = config
        .dump_snapshots
        .then(|| ArtifactPaths::snapshot_dir(out_dir, stage, &tag));
    let output = run::<F>(config, stage, snapshots)?;
    let paths = write_artifacts(out_dir, &output)?;
    Ok((output.summary, paths))
}

/// Runs `stage` at the configured precision and writes its artifacts to `out_dir`.
pub fn run_to_dir(
    config: &RunConfig,
    stage: Stage,
    out_dir: &Path,
) -> Result<(RunSummary, ArtifactPaths), RunError> {
    match config.precision {
        Precision::F32 => run_and_write::<f32>(config, stage, out_dir),
        Precision::F64 => run_and_write::<f64>(config, stage, out_dir),
    }
}
