use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Training-time augmentation: zero-pad + random crop, horizontal flip,
/// then per-channel normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub crop_pad: usize,
    pub hflip_prob: f64,
}

impl AugmentSpec {
    /// No crop, no flip, mean 0 / std 1.
    pub fn identity(channels: usize) -> Self {
        AugmentSpec {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
            crop_pad: 0,
            hflip_prob: 0.0,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::config("hflip_prob must lie in [0, 1]"));
        }
        if self.mean.len() != channels || self.std.len() != channels {
            return Err(Error::config("normalization stats must have one entry per channel"));
        }
        if self.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::config("normalization std must be positive"));
        }
        Ok(())
    }
}

fn dims(images: &Tensor) -> Result<[usize; 4]> {
    match *images.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::Dimension {
            op: "augment",
            lhs: images.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// The `H x W` window at offset `(oy, ox)` of a `[C, H, W]` image zero-padded
/// by `pad` on every side.
pub fn crop_window(image: &[f64], c: usize, h: usize, w: usize, pad: usize, oy: usize, ox: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + oy) as isize - pad as isize;
            if sy < 0 || sy as usize >= h {
                continue;
            }
            for x in 0..w {
                let sx = (x + ox) as isize - pad as isize;
                if sx >= 0 && (sx as usize) < w {
                    out[(ch * h + y) * w + x] = image[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Mirrors each row of a `[C, H, W]` image in place.
pub fn hflip(image: &mut [f64], w: usize) {
    for row in image.chunks_mut(w) {
        row.reverse();
    }
}

/// `(x - mean[c]) / std[c]` per channel.
pub fn normalize(images: &Tensor, mean: &[f64], std: &[f64]) -> Result<Tensor> {
    let [_, c, h, w] = dims(images)?;
    if mean.len() != c || std.len() != c {
        return Err(Error::Dimension {
            op: "normalize",
            lhs: images.shape().to_vec(),
            rhs: vec![mean.len(), std.len()],
        });
    }
    let hw = h * w;
    let mut data = images.data().to_vec();
    for (i, plane) in data.chunks_mut(hw).enumerate() {
        let ch = i % c;
        plane.iter_mut().for_each(|v| *v = (*v - mean[ch]) / std[ch]);
    }
    Tensor::new(images.shape().to_vec(), data)
}

/// Per-channel mean and population standard deviation.
pub fn channel_stats(images: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let [n, c, h, w] = dims(images)?;
    let hw = h * w;
    let count = (n * hw) as f64;
    let mut sum = vec![0.0; c];
    let mut sq = vec![0.0; c];
    for (i, plane) in images.data().chunks(hw).enumerate() {
        sum[i % c] += plane.iter().sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    for (i, plane) in images.data().chunks(hw).enumerate() {
        let m = mean[i % c];
        sq[i % c] += plane.iter().map(|v| (v - m).powi(2)).sum::<f64>();
    }
    let std = sq.iter().map(|s| (s / count).sqrt().max(1e-12)).collect();
    Ok((mean, std))
}

/// Random crop and flip per image followed by normalization.
pub fn augment_batch<R: Rng>(images: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    let [_, c, h, w] = dims(images)?;
    let len = c * h * w;
    let pad = spec.crop_pad;
    let mut data = Vec::with_capacity(images.numel());
    for image in images.data().chunks(len) {
        let oy = rng.random_range(0..=2 * pad);
        let ox = rng.random_range(0..=2 * pad);
        let mut out = if pad == 0 {
            image.to_vec()
        } else {
            crop_window(image, c, h, w, pad, oy, ox)
        };
        if rng.random_bool(spec.hflip_prob) {
            hflip(&mut out, w);
        }
        data.extend(out);
    }
    normalize(&Tensor::new(images.shape().to_vec(), data)?, &spec.mean, &spec.std)
}
