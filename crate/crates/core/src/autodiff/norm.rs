use serde::{Deserialize, Serialize};

use super::{Mode, Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel running mean/variance of a batch-norm layer.
///
/// Starts at mean 0 / variance 1. Eval-mode normalization is refused until
/// the stats are marked ready, either by a train-mode pass or explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub ready: bool,
}

impl RunningStats {
    /// Fresh stats that must see a train-mode batch before eval use.
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            ready: false,
        }
    }

    /// Stats at their defaults (mean 0, variance 1), usable in eval mode.
    pub fn identity(channels: usize) -> Self {
        RunningStats {
            ready: true,
            ..RunningStats::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }
}

/// Visits the `H*W` plane of channel `c` for every image in the batch.
fn for_channel(n: usize, ch: usize, c: usize, hw: usize, mut f: impl FnMut(usize)) {
    for b in 0..n {
        let start = (b * ch + c) * hw;
        for i in start..start + hw {
            f(i);
        }
    }
}

impl Tape {
    /// Batch normalization over `(N, H, W)` for each channel of `x: [N, C, H, W]`.
    ///
    /// Train mode normalizes with batch statistics and updates `stats` with
    /// momentum 0.1 (unbiased variance); eval mode uses `stats` as-is.
    pub fn batch_norm_2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats,
        mode: Mode,
    ) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let &[n, ch, h, w] = tx.shape() else {
            return Err(Error::Dimension {
                op: "batch_norm_2d",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        };
        if tg.shape() != [ch] || tb.shape() != [ch] || stats.channels() != ch {
            return Err(Error::Dimension {
                op: "batch_norm_2d",
                lhs: tx.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        let hw = h * w;
        let m = n * hw;
        let data = tx.data();

        let (mean, var) = match mode {
            Mode::Train => {
                if m < 2 {
                    return Err(Error::contract(
                        "batch_norm_2d in train mode needs at least 2 values per channel",
                    ));
                }
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for c in 0..ch {
                    let mut s = 0.0;
                    for_channel(n, ch, c, hw, |i| s += data[i]);
                    let mu = s / m as f64;
                    let mut sq = 0.0;
                    for_channel(n, ch, c, hw, |i| sq += (data[i] - mu).powi(2));
                    mean[c] = mu;
                    var[c] = sq / m as f64;
                }
                (mean, var)
            }
            Mode::Eval => {
                if !stats.ready {
                    return Err(Error::State(
                        "batch_norm_2d eval mode with uninitialized running stats".into(),
                    ));
                }
                (stats.mean.clone(), stats.var.clone())
            }
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; data.len()];
        let mut out = vec![0.0; data.len()];
        for c in 0..ch {
            let (g, b) = (tg.data()[c], tb.data()[c]);
            for_channel(n, ch, c, hw, |i| {
                xhat[i] = (data[i] - mean[c]) * inv_std[c];
                out[i] = g * xhat[i] + b;
            });
        }

        if mode == Mode::Train {
            let unbias = m as f64 / (m - 1) as f64;
            for c in 0..ch {
                stats.mean[c] = (1.0 - BN_MOMENTUM) * stats.mean[c] + BN_MOMENTUM * mean[c];
                stats.var[c] = (1.0 - BN_MOMENTUM) * stats.var[c] + BN_MOMENTUM * var[c] * unbias;
            }
            stats.ready = true;
        }

        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        };
        self.push(t, op, &[x, gamma, beta], "batch_norm_2d")
    }

    pub(super) fn batch_norm_backward(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            batch_stats,
        } = &self.nodes[id].op
        else {
            unreachable!()
        };
        let shape = self.value(*x).shape();
        let (n, ch, hw) = (shape[0], shape[1], shape[2] * shape[3]);
        let m = (n * hw) as f64;
        let tg = self.value(*gamma);

        let mut sum_g = vec![0.0; ch];
        let mut sum_gx = vec![0.0; ch];
        for c in 0..ch {
            for_channel(n, ch, c, hw, |i| {
                sum_g[c] += g[i];
                sum_gx[c] += g[i] * xhat[i];
            });
        }

        self.accumulate(grads, *gamma, |d| d.iter_mut().zip(&sum_gx).for_each(|(d, s)| *d += s));
        self.accumulate(grads, *beta, |d| d.iter_mut().zip(&sum_g).for_each(|(d, s)| *d += s));
        self.accumulate(grads, *x, |dx| {
            for c in 0..ch {
                let scale = tg.data()[c] * inv_std[c];
                if *batch_stats {
                    // dxhat = g * gamma; sums of dxhat are gamma-scaled sums of g
                    let (sg, sgx) = (sum_g[c], sum_gx[c]);
                    for_channel(n, ch, c, hw, |i| {
                        dx[i] += scale * (g[i] - sg / m - xhat[i] * sgx / m);
                    });
                } else {
                    for_channel(n, ch, c, hw, |i| dx[i] += scale * g[i]);
                }
            }
        });
    }
}
