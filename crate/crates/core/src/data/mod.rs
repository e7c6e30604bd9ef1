//! Labeled image datasets, symmetric label noise and train/test splitting.

mod augment;
mod cifar;
mod synthetic;

pub use augment::{augment_batch, channel_stats, crop_window, hflip, normalize, AugmentSpec};
pub use cifar::{load_cifar, load_cifar10_binary, CifarFormat};
pub use synthetic::{generate_synthetic, SyntheticSpec, PROTOTYPE_CONTRAST};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images with their given (possibly corrupted) labels, the ground truth,
/// and a mask of which labels were corrupted.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    images: Tensor,
    given_labels: Vec<usize>,
    true_labels: Vec<usize>,
    flip_mask: Vec<bool>,
    num_classes: usize,
    sample_ids: Vec<usize>,
}

impl LabeledDataset {
    /// A clean dataset: given labels equal true labels, ids are `0..N`.
    pub fn clean(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        LabeledDataset::from_parts(images, labels.clone(), labels, num_classes, (0..n).collect())
    }

    pub fn from_parts(
        images: Tensor,
        given_labels: Vec<usize>,
        true_labels: Vec<usize>,
        num_classes: usize,
        sample_ids: Vec<usize>,
    ) -> Result<Self> {
        let n = given_labels.len();
        if images.ndim() != 4 || images.shape()[0] != n || true_labels.len() != n || sample_ids.len() != n {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: images.shape().to_vec(),
                rhs: vec![n, true_labels.len(), sample_ids.len()],
            });
        }
        if let Some(&bad) = given_labels.iter().chain(&true_labels).find(|&&y| y >= num_classes) {
            return Err(Error::contract(format!("label {bad} outside [0, {num_classes})")));
        }
        let mut seen = sample_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("sample ids must be unique"));
        }
        let flip_mask = given_labels.iter().zip(&true_labels).map(|(g, t)| g != t).collect();
        Ok(LabeledDataset {
            images,
            given_labels,
            true_labels,
            flip_mask,
            num_classes,
            sample_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.given_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.given_labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn given_labels(&self) -> &[usize] {
        &self.given_labels
    }

    pub fn true_labels(&self) -> &[usize] {
        &self.true_labels
    }

    pub fn flip_mask(&self) -> &[bool] {
        &self.flip_mask
    }

    pub fn num_flipped(&self) -> usize {
        self.flip_mask.iter().filter(|&&f| f).count()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample_ids(&self) -> &[usize] {
        &self.sample_ids
    }

    /// `(C, H, W)` of each image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The samples at positions `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        LabeledDataset {
            images: self.images.select_rows(indices),
            given_labels: pick(&self.given_labels),
            true_labels: pick(&self.true_labels),
            flip_mask: indices.iter().map(|&i| self.flip_mask[i]).collect(),
            num_classes: self.num_classes,
            sample_ids: pick(&self.sample_ids),
        }
    }

    /// Given labels restored to the ground truth.
    pub fn without_noise(&self) -> LabeledDataset {
        LabeledDataset {
            given_labels: self.true_labels.clone(),
            flip_mask: vec![false; self.len()],
            ..self.clone()
        }
    }
}

/// Symmetric label-noise level and the seed that realizes it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub rate: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Flips exactly `round(rate * N)` labels, chosen uniformly without
/// replacement; each flipped label is drawn uniformly from the `K - 1`
/// classes other than the true one.
pub fn inject_symmetric_noise(ds: &LabeledDataset, spec: &NoiseSpec) -> Result<LabeledDataset> {
    if !(0.0..=1.0).contains(&spec.rate) {
        return Err(Error::contract(format!("noise rate {} outside [0, 1]", spec.rate)));
    }
    if ds.num_classes < 2 {
        return Err(Error::contract("symmetric noise needs at least 2 classes"));
    }
    if ds.flip_mask.iter().any(|&f| f) {
        return Err(Error::contract("noise can only be injected into a clean dataset"));
    }
    let n = ds.len();
    let count = (spec.rate * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let chosen = rand::seq::index::sample(&mut rng, n, count);

    let mut out = ds.clone();
    for i in chosen.iter() {
        let truth = ds.true_labels[i];
        let r = rng.random_range(0..ds.num_classes - 1);
        out.given_labels[i] = if r >= truth { r + 1 } else { r };
        out.flip_mask[i] = true;
    }
    Ok(out)
}

/// Random `train:test` partition; the train part has `round(N * train / (train + test))` samples.
pub fn split_train_test(ds: &LabeledDataset, ratio: (u32, u32), seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let (a, b) = ratio;
    if a == 0 || b == 0 {
        return Err(Error::contract("split ratio parts must be positive"));
    }
    let n = ds.len();
    let n_train = (n as f64 * a as f64 / (a + b) as f64).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::contract(format!("split of {n} samples leaves an empty side")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((ds.subset(&order[..n_train]), ds.subset(&order[n_train..])))
}
