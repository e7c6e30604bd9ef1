mod common;

use common::{tiny, tiny_resnet};
use elr_core::autodiff::Parameterized;
use elr_core::harness::{
    load_checkpoint, read_csv, read_json, read_summary, run_experiment, AugmentConfig, DatasetSpec, LossSpec,
    Trainer, CONFIG_TOML, METRICS_CSV, METRICS_JSON, SUMMARY_JSON,
};
use elr_core::schedule::ScheduleConfig;
use elr_core::Error;

fn params(t: &Trainer) -> Vec<Vec<f64>> {
    t.model.parameters().iter().map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn elr_with_zero_lambda_follows_the_ce_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let mut ce = Trainer::new(&tiny(LossSpec::Ce, 6, dir.path())).unwrap();
    let mut elr = Trainer::new(&tiny(LossSpec::Elr { lambda: 0.0, beta: 0.7 }, 6, dir.path())).unwrap();
    assert_eq!(params(&ce), params(&elr));
    for _ in 0..6 {
        ce.train_epoch().unwrap();
        elr.train_epoch().unwrap();
        assert_eq!(params(&ce), params(&elr));
        let (a, b) = (ce.metrics_row(None).unwrap(), elr.metrics_row(None).unwrap());
        assert_eq!((a.train_ce, a.test_ce, a.top1), (b.train_ce, b.test_ce, b.top1));
    }
}

#[test]
fn zero_epochs_writes_only_the_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let result = run_experiment(&tiny(LossSpec::Ce, 0, dir.path())).unwrap();
    assert_eq!(result.metrics.len(), 1);
    assert_eq!(result.metrics[0].epoch, 0);
    assert_eq!(read_csv(&dir.path().join(METRICS_CSV)).unwrap().len(), 1);
    assert_eq!(load_checkpoint(&result.checkpoint).unwrap().epoch, 0);
}

#[test]
fn long_run_writes_one_row_per_epoch_plus_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(LossSpec::Elr { lambda: 3.0, beta: 0.7 }, 150, dir.path());
    let result = run_experiment(&config).unwrap();
    let rows = read_csv(&dir.path().join(METRICS_CSV)).unwrap();
    assert_eq!(rows.len(), 151);
    assert!(rows.iter().enumerate().all(|(i, r)| r.epoch == i));
    assert_eq!(rows, result.metrics);
    assert_eq!(read_json(&dir.path().join(METRICS_JSON)).unwrap(), result.metrics);

    let summary = read_summary(&dir.path().join(SUMMARY_JSON)).unwrap();
    assert_eq!(summary.config_hash, config.hash());
    assert_eq!(summary.epochs, 150);
    assert_eq!(summary.final_top1, result.final_top1);
    assert_eq!(summary.config, config);
    let snapshot = std::fs::read_to_string(dir.path().join(CONFIG_TOML)).unwrap();
    assert_eq!(elr_core::harness::ExperimentConfig::from_toml_str(&snapshot).unwrap(), config);
}

#[test]
fn identical_configs_give_identical_csv_bytes() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for loss in [LossSpec::Ce, LossSpec::Elr { lambda: 3.0, beta: 0.7 }] {
        run_experiment(&tiny(loss, 8, a.path())).unwrap();
        run_experiment(&tiny(loss, 8, b.path())).unwrap();
        let x = std::fs::read(a.path().join(METRICS_CSV)).unwrap();
        let y = std::fs::read(b.path().join(METRICS_CSV)).unwrap();
        assert_eq!(x, y);
    }
}

#[test]
fn checkpoint_reproduces_final_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny(LossSpec::Elr { lambda: 3.0, beta: 0.7 }, 4, dir.path());
    let result = run_experiment(&config).unwrap();
    let mut trainer = Trainer::new(&config).unwrap();
    let ckpt = load_checkpoint(&result.checkpoint).unwrap();
    assert_eq!(ckpt.epoch, 4);
    trainer.model = ckpt.model;
    trainer.targets = ckpt.targets;
    let ev = trainer.evaluate().unwrap();
    let last = result.final_row();
    assert_eq!((ev.top1, ev.train_total, ev.test_ce), (last.top1, last.train_total, last.test_ce));
}

#[test]
fn missing_cifar_file_fails_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(LossSpec::Ce, 5, &dir.path().join("out"));
    config.dataset = DatasetSpec::Cifar10 {
        files: vec![dir.path().join("data_batch_1.bin")],
        limit: None,
    };
    config.model = elr_core::harness::ArchSpec::Mlp { hidden: vec![4] };
    let err = run_experiment(&config).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(!dir.path().join("out").join(METRICS_CSV).exists());
}

#[test]
fn divergence_aborts_with_epoch_and_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny(LossSpec::Ce, 5, dir.path());
    config.schedule = ScheduleConfig::Multistep {
        base_lr: 1e300,
        milestones: vec![],
        decay_factor: 10.0,
    };
    let err = run_experiment(&config).unwrap_err();
    assert!(matches!(err, Error::Numerical { epoch: 1, .. }), "{err}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn resnet_with_augmentation_and_sam_trains() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = tiny_resnet(LossSpec::Elr { lambda: 3.0, beta: 0.7 }, 2, dir.path());
    config.optimizer.sam_rho = 0.05;
    config.augment = Some(AugmentConfig::default());
    let result = run_experiment(&config).unwrap();
    assert_eq!(result.metrics.len(), 3);
    assert!(result.metrics.iter().all(|r| r.train_total.is_finite() && r.test_ce.is_finite()));
    let again = run_experiment(&config).unwrap();
    assert_eq!(again.metrics, result.metrics);
}

#[test]
fn noise_is_injected_before_the_split() {
    let dir = tempfile::tempdir().unwrap();
    let trainer = Trainer::new(&tiny(LossSpec::Ce, 1, dir.path())).unwrap();
    assert_eq!(trainer.train.len() + trainer.test.len(), 36);
    assert!(trainer.train.num_flipped() + trainer.test.num_flipped() == 9);
}
