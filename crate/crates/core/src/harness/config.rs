use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    generate_synthetic, inject_symmetric_noise, load_cifar, split_train_test, CifarFormat, LabeledDataset, NoiseSpec,
    SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimizerConfig;
use crate::schedule::ScheduleConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic {
        classes: usize,
        per_class: usize,
        image_shape: [usize; 3],
        noise_std: f64,
        seed: u64,
    },
    Cifar10 {
        files: Vec<PathBuf>,
        /// Keep only the first `limit` records.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
    Cifar100 {
        files: Vec<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        limit: Option<usize>,
    },
}

impl DatasetSpec {
    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synthetic { classes, .. } => *classes,
            DatasetSpec::Cifar10 { .. } => 10,
            DatasetSpec::Cifar100 { .. } => 100,
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetSpec::Synthetic { image_shape, .. } => *image_shape,
            _ => [3, 32, 32],
        }
    }

    fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match *self {
            DatasetSpec::Synthetic {
                classes,
                per_class,
                image_shape,
                noise_std,
                seed,
            } => Some(SyntheticSpec {
                classes,
                per_class,
                image_shape,
                noise_std,
                seed,
            }),
            _ => None,
        }
    }

    /// Loads or generates the clean dataset.
    pub fn load(&self) -> Result<LabeledDataset> {
        let (files, limit, format) = match self {
            DatasetSpec::Synthetic { .. } => return generate_synthetic(&self.synthetic_spec().expect("synthetic")),
            DatasetSpec::Cifar10 { files, limit } => (files, limit, CifarFormat::Cifar10),
            DatasetSpec::Cifar100 { files, limit } => (files, limit, CifarFormat::Cifar100),
        };
        let ds = load_cifar(files, format)?;
        Ok(match limit {
            Some(n) if *n < ds.len() => ds.subset(&(0..*n).collect::<Vec<_>>()),
            _ => ds,
        })
    }

    /// Fails early when a dataset file is missing.
    pub fn check_files(&self) -> Result<()> {
        if let DatasetSpec::Cifar10 { files, .. } | DatasetSpec::Cifar100 { files, .. } = self {
            if files.is_empty() {
                return Err(Error::config("cifar dataset lists no files"));
            }
            for f in files {
                std::fs::metadata(f).map_err(|e| Error::io(f, e))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase", deny_unknown_fields)]
pub enum ArchSpec {
    Mlp {
        hidden: Vec<usize>,
    },
    Resnet {
        block_counts: [usize; 4],
        #[serde(default = "default_base_channels")]
        base_channels: usize,
    },
}

fn default_base_channels() -> usize {
    16
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LossSpec {
    Ce,
    Elr { lambda: f64, beta: f64 },
}

/// Augmentation knobs; normalization stats default to the train split's
/// per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_crop_pad")]
    pub crop_pad: usize,
    #[serde(default = "default_hflip")]
    pub hflip_prob: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<Vec<f64>>,
}

fn default_crop_pad() -> usize {
    4
}

fn default_hflip() -> f64 {
    0.5
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            crop_pad: default_crop_pad(),
            hflip_prob: default_hflip(),
            mean: None,
            std: None,
        }
    }
}

fn default_split() -> [u32; 2] {
    [9, 1]
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ArchSpec,
    pub loss: LossSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub noise: NoiseSpec,
    #[serde(default = "default_split")]
    pub split: [u32; 2],
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default)]
    pub run_seed: u64,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub augment: Option<AugmentConfig>,
    /// Adds elapsed seconds to each metrics row; off keeps output byte-reproducible.
    #[serde(default)]
    pub record_wall_time: bool,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ExperimentConfig::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(s) = self.dataset.synthetic_spec() {
            s.validate()?;
        }
        self.model_config().validate()?;
        if let LossSpec::Elr { lambda, beta } = self.loss {
            if !(lambda >= 0.0 && lambda.is_finite()) {
                return Err(Error::config("elr lambda must be finite and >= 0"));
            }
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::config("elr beta must lie in [0, 1]"));
            }
        }
        self.optimizer.validate()?;
        self.schedule.validate()?;
        if self.batch_size < 1 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.noise.rate) {
            return Err(Error::config("noise rate must lie in [0, 1]"));
        }
        if self.split.contains(&0) {
            return Err(Error::config("split ratio parts must be positive"));
        }
        if let Some(a) = &self.augment {
            if !(0.0..=1.0).contains(&a.hflip_prob) {
                return Err(Error::config("hflip_prob must lie in [0, 1]"));
            }
            let c = self.dataset.image_shape()[0];
            for stats in [&a.mean, &a.std].into_iter().flatten() {
                if stats.len() != c {
                    return Err(Error::config("normalization stats need one entry per channel"));
                }
            }
        }
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        let k = self.dataset.num_classes();
        let shape = self.dataset.image_shape();
        match &self.model {
            ArchSpec::Mlp { hidden } => ModelConfig::mlp(hidden, k, shape),
            ArchSpec::Resnet {
                block_counts,
                base_channels,
            } => ModelConfig::resnet(*block_counts, *base_channels, k, shape),
        }
    }

    /// Clean data → symmetric noise → train/test split.
    pub fn prepare_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        self.dataset.check_files()?;
        let clean = self.dataset.load()?;
        let noisy = inject_symmetric_noise(&clean, &self.noise)?;
        split_train_test(&noisy, (self.split[0], self.split[1]), self.split_seed)
    }

    /// Hex prefix of the SHA-256 of the config's JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"
epochs = 5
batch_size = 32
output_dir = "runs/x"

[dataset]
kind = "synthetic"
classes = 4
per_class = 10
image_shape = [1, 4, 4]
noise_std = 0.1
seed = 3

[model]
arch = "mlp"
hidden = [8]

[loss]
kind = "elr"
lambda = 3.0
beta = 0.7

[schedule]
kind = "cosine"
eta_min = 0.001
eta_max = 0.02
t_max = 10

[noise]
rate = 0.2
seed = 1
"#;

    #[test]
    fn parses_with_defaults() {
        let c = ExperimentConfig::from_toml_str(DESK).unwrap();
        assert_eq!(c.split, [9, 1]);
        assert_eq!(c.optimizer, OptimizerConfig::default());
        assert_eq!(c.model_config().num_classes, 4);
        assert_eq!(c.model_config().input_shape, [1, 4, 4]);
        assert!(!c.record_wall_time);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let typo = DESK.replace("batch_size", "batchsize");
        assert!(matches!(ExperimentConfig::from_toml_str(&typo), Err(Error::Config(_))));
        let nested = DESK.replace("beta = 0.7", "beta = 0.7\nlamda = 2.0");
        assert!(ExperimentConfig::from_toml_str(&nested).is_err());
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(ExperimentConfig::from_toml_str(&DESK.replace("beta = 0.7", "beta = 1.7")).is_err());
        assert!(ExperimentConfig::from_toml_str(&DESK.replace("batch_size = 32", "batch_size = 0")).is_err());
        assert!(ExperimentConfig::from_toml_str(&DESK.replace("rate = 0.2", "rate = 2.0")).is_err());
    }

    #[test]
    fn toml_round_trip_and_stable_hash() {
        let c = ExperimentConfig::from_toml_str(DESK).unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_eq!(c.hash().len(), 16);
        let mut other = c.clone();
        other.run_seed = 1;
        assert_ne!(other.hash(), c.hash());
    }

    #[test]
    fn data_pipeline_sizes() {
        let c = ExperimentConfig::from_toml_str(DESK).unwrap();
        let (train, test) = c.prepare_data().unwrap();
        assert_eq!((train.len(), test.len()), (36, 4));
        assert_eq!(train.num_flipped() + test.num_flipped(), 8);
    }

    #[test]
    fn missing_cifar_file_is_io_error() {
        let spec = DatasetSpec::Cifar10 {
            files: vec!["/nonexistent/data_batch_1.bin".into()],
            limit: None,
        };
        assert!(matches!(spec.check_files(), Err(Error::Io { .. })));
    }
}
