//! Named experiment configs. Each has a matching file under `configs/`.

use super::config::{ArchSpec, AugmentConfig, DatasetSpec, ExperimentConfig, LossSpec};
use crate::data::NoiseSpec;
use crate::optim::OptimizerConfig;
use crate::schedule::ScheduleConfig;

pub const PROFILE_NAMES: [&str; 4] = ["desk_ce", "desk_elr", "cifar10_default", "cifar100_default"];

pub fn profile(name: &str) -> Option<ExperimentConfig> {
    match name {
        "desk_ce" => Some(desk(LossSpec::Ce, 0)),
        "desk_elr" => Some(desk(LossSpec::Elr { lambda: 3.0, beta: 0.7 }, 0)),
        "cifar10_default" => Some(cifar10_default()),
        "cifar100_default" => Some(cifar100_default()),
        _ => None,
    }
}

/// Synthetic 10-class data with 20% symmetric noise and a one-hidden-layer
/// MLP; small enough to train 100 epochs in well under a minute.
/// `seed` drives the prototypes, the noise, the split and the run.
pub fn desk(loss: LossSpec, seed: u64) -> ExperimentConfig {
    let tag = match loss {
        LossSpec::Ce => "ce",
        LossSpec::Elr { .. } => "elr",
    };
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            classes: 10,
            per_class: 500,
            image_shape: [3, 8, 8],
            noise_std: 0.15,
            seed: 100 + seed,
        },
        model: ArchSpec::Mlp { hidden: vec![512] },
        loss,
        optimizer: OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.0,
            sam_rho: 0.0,
        },
        schedule: ScheduleConfig::Cosine {
            eta_min: 0.001,
            eta_max: 0.02,
            t_max: 100,
        },
        epochs: 100,
        batch_size: 32,
        noise: NoiseSpec { rate: 0.2, seed },
        split: [9, 1],
        split_seed: seed,
        run_seed: seed,
        output_dir: format!("runs/desk_{tag}_s{seed}").into(),
        augment: None,
        record_wall_time: false,
    }
}

fn cifar_files(dir: &str, names: &[&str]) -> Vec<std::path::PathBuf> {
    names.iter().map(|n| format!("{dir}/{n}").into()).collect()
}

pub fn cifar10_default() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Cifar10 {
            files: cifar_files(
                "data/cifar-10-batches-bin",
                &[
                    "data_batch_1.bin",
                    "data_batch_2.bin",
                    "data_batch_3.bin",
                    "data_batch_4.bin",
                    "data_batch_5.bin",
                    "test_batch.bin",
                ],
            ),
            limit: None,
        },
        model: ArchSpec::Resnet {
            block_counts: [3, 4, 6, 3],
            base_channels: 64,
        },
        loss: LossSpec::Elr { lambda: 3.0, beta: 0.7 },
        optimizer: OptimizerConfig {
            momentum: 0.9,
            weight_decay: 0.001,
            sam_rho: 0.0,
        },
        schedule: ScheduleConfig::Multistep {
            base_lr: 0.02,
            milestones: vec![40, 80],
            decay_factor: 10.0,
        },
        epochs: 120,
        batch_size: 128,
        noise: NoiseSpec { rate: 0.2, seed: 0 },
        split: [9, 1],
        split_seed: 0,
        run_seed: 0,
        output_dir: "runs/cifar10_default".into(),
        augment: Some(AugmentConfig::default()),
        record_wall_time: false,
    }
}

pub fn cifar100_default() -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Cifar100 {
            files: cifar_files("data/cifar-100-binary", &["train.bin", "test.bin"]),
            limit: None,
        },
        loss: LossSpec::Elr { lambda: 7.0, beta: 0.9 },
        schedule: ScheduleConfig::Multistep {
            base_lr: 0.02,
            milestones: vec![80, 120],
            decay_factor: 10.0,
        },
        epochs: 150,
        output_dir: "runs/cifar100_default".into(),
        ..cifar10_default()
    }
}
