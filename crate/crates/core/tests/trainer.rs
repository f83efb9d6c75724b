mod common;

use common::{blob_config, frozen_changes, tuner};
use neuroselect::selection::PolicyTag;
use neuroselect::trainer::{run_to_dir, Budget, ModelSource, RunError, Stage};

#[test]
fn frozen_parameters_never_move() {
    for policy in ["velocity", "reweighted", "random"] {
        let config = blob_config(policy, 0.1, 5, 1);
        let mut t = tuner(&config, None);
        for _ in 0..config.epochs {
            let before = t.model().clone();
            let record = t.run_epoch().unwrap();
            assert!(record.mask_cost <= record.budget);
            let changed = frozen_changes(&before, t.model(), t.last_mask().unwrap());
            assert!(
                changed.is_empty(),
                "{policy} epoch {}: {changed:?}",
                record.epoch
            );
        }
    }
}

#[test]
fn threshold_policy_freezes_equilibrium_neurons() {
    let mut config = blob_config("threshold", 1.0, 4, 2);
    config.epsilon = 1e-3;
    let mut t = tuner(&config, None);
    t.run_epoch().unwrap();
    for _ in 1..config.epochs {
        let v = t.tracker().unwrap().latest().unwrap().velocity.clone();
        let before = t.model().clone();
        t.run_epoch().unwrap();
        let mask = t.last_mask().unwrap();
        let pinned = t.selector().pinned();
        for (i, v) in v.iter().enumerate() {
            assert_eq!(
                mask.contains(i),
                v.abs() >= config.epsilon || pinned.contains(&i),
                "neuron {i}"
            );
        }
        assert!(frozen_changes(&before, t.model(), mask).is_empty());
    }
}

#[test]
fn full_policy_updates_everything() {
    let config = blob_config("full", 1.0, 3, 0);
    let mut t = tuner(&config, None);
    let n = t.table().len();
    for _ in 0..3 {
        let r = t.run_epoch().unwrap();
        assert_eq!(r.mask_neurons, n);
        assert_eq!(r.flops_saved_pct, 0.0);
        assert_eq!(r.policy, PolicyTag::Full);
    }
}

#[test]
fn training_learns_separable_blobs() {
    let mut config = blob_config("full", 1.0, 15, 0);
    config.pretrain_data = config.finetune_data.take();
    let dir = tempfile::tempdir().unwrap();
    let (summary, paths) = run_to_dir(&config, Stage::Pretrain, dir.path()).unwrap();
    assert!(
        summary.final_test_top1 >= 0.9,
        "top-1 {}",
        summary.final_test_top1
    );
    assert!(paths.checkpoint.exists());

    // Fine-tune from the checkpoint on a 4-class task.
    let mut ft = blob_config("velocity", 0.3, 2, 0);
    ft.model = ModelSource::Checkpoint(paths.checkpoint.clone());
    if let Some(neuroselect::trainer::DataSource::Blobs { classes, .. }) = &mut ft.finetune_data {
        *classes = 4;
    }
    match run_to_dir(&ft, Stage::Finetune, dir.path()) {
        Err(RunError::Mismatch(m)) => assert!(m.contains("reset_classifier"), "{m}"),
        other => panic!("{other:?}"),
    }
    ft.reset_classifier = true;
    let (summary, _) = run_to_dir(&ft, Stage::Finetune, dir.path()).unwrap();
    assert_eq!(summary.epochs, 2);
}

#[test]
fn runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = blob_config("random", 0.2, 3, 7);
    let (_, a) = run_to_dir(&config, Stage::Finetune, &dir.path().join("a")).unwrap();
    let (_, b) = run_to_dir(&config, Stage::Finetune, &dir.path().join("b")).unwrap();
    assert_eq!(
        std::fs::read(&a.metrics).unwrap(),
        std::fs::read(&b.metrics).unwrap()
    );
    assert_eq!(
        std::fs::read(&a.checkpoint).unwrap(),
        std::fs::read(&b.checkpoint).unwrap()
    );

    let mut other = config.clone();
    other.seeds.selection = 8;
    let (_, c) = run_to_dir(&other, Stage::Finetune, &dir.path().join("c")).unwrap();
    assert_ne!(
        std::fs::read(&a.metrics).unwrap(),
        std::fs::read(&c.metrics).unwrap()
    );
}

#[test]
fn budget_below_classifier_is_rejected() {
    let mut config = blob_config("velocity", 0.1, 2, 0);
    config.budget = Budget::Params(3);
    let dir = tempfile::tempdir().unwrap();
    let r = run_to_dir(&config, Stage::Finetune, dir.path());
    assert!(matches!(r, Err(RunError::Budget(_))), "{r:?}");
}
