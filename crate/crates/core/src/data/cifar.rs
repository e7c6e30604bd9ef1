use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PIXELS: usize = 3 * 32 * 32;

/// CIFAR binary layouts: CIFAR-10 has one label byte per record, CIFAR-100
/// a coarse byte followed by the fine label used here.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarFormat {
    Cifar10,
    Cifar100,
}

impl CifarFormat {
    pub fn num_classes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 10,
            CifarFormat::Cifar100 => 100,
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarFormat::Cifar10 => 1,
            CifarFormat::Cifar100 => 2,
        }
    }

    pub fn record_len(self) -> usize {
        self.label_bytes() + PIXELS
    }
}

pub fn load_cifar10_binary<P: AsRef<Path>>(paths: &[P]) -> Result<LabeledDataset> {
    load_cifar(paths, CifarFormat::Cifar10)
}

/// Reads and concatenates CIFAR binary batch files; pixels scaled to `[0, 1]`.
pub fn load_cifar<P: AsRef<Path>>(paths: &[P], format: CifarFormat) -> Result<LabeledDataset> {
    let record = format.record_len();
    let k = format.num_classes();
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for path in paths {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            let whole = bytes.len() - bytes.len() % record;
            return Err(Error::Format {
                path: path.to_path_buf(),
                offset: whole as u64,
                msg: format!("length {} is not a positive multiple of {record}", bytes.len()),
            });
        }
        for (r, chunk) in bytes.chunks_exact(record).enumerate() {
            let label = chunk[format.label_bytes() - 1] as usize;
            if label >= k {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: (r * record + format.label_bytes() - 1) as u64,
                    msg: format!("label {label} outside [0, {k})"),
                });
            }
            labels.push(label);
            pixels.extend(chunk[format.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
        }
    }
    let n = labels.len();
    LabeledDataset::clean(Tensor::new(vec![n, 3, 32, 32], pixels)?, labels, k)
}
