#![allow(dead_code)]

use std::path::Path;

use elr_core::data::NoiseSpec;
use elr_core::harness::{ArchSpec, DatasetSpec, ExperimentConfig, LossSpec};
use elr_core::optim::OptimizerConfig;
use elr_core::schedule::ScheduleConfig;

/// A few dozen 4x4 synthetic images and an 8-unit MLP: trains in milliseconds.
pub fn tiny(loss: LossSpec, epochs: usize, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            classes: 3,
            per_class: 12,
            image_shape: [1, 4, 4],
            noise_std: 0.1,
            seed: 5,
        },
        model: ArchSpec::Mlp { hidden: vec![8] },
        loss,
        optimizer: OptimizerConfig {
            momentum: 0.9,
            weight_decay: 1e-3,
            sam_rho: 0.0,
        },
        schedule: ScheduleConfig::Cosine {
            eta_min: 0.001,
            eta_max: 0.05,
            t_max: 10,
        },
        epochs,
        batch_size: 8,
        noise: NoiseSpec { rate: 0.25, seed: 3 },
        split: [3, 1],
        split_seed: 1,
        run_seed: 2,
        output_dir: out.to_path_buf(),
        augment: None,
        record_wall_time: false,
    }
}

/// Same data shape through a one-block-per-stage residual net.
pub fn tiny_resnet(loss: LossSpec, epochs: usize, out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        dataset: DatasetSpec::Synthetic {
            classes: 3,
            per_class: 8,
            image_shape: [3, 8, 8],
            noise_std: 0.1,
            seed: 5,
        },
        model: ArchSpec::Resnet {
            block_counts: [1, 1, 1, 1],
            base_channels: 2,
        },
        batch_size: 6,
        ..tiny(loss, epochs, out)
    }
}
