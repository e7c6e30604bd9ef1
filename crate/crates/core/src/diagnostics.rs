//! Memorization tracking on noisy-labeled samples and top-k accuracy.

use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// How the predictions on the flipped samples split between the true label,
/// the given (noisy) label and anything else.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemorizationRecord {
    pub epoch: usize,
    pub frac_correct: f64,
    pub frac_memorized: f64,
    pub frac_other: f64,
    /// Number of flipped samples; 0 marks the empty record.
    pub flipped: usize,
}

impl MemorizationRecord {
    /// The record for a dataset without flipped labels.
    pub fn empty(epoch: usize) -> Self {
        MemorizationRecord {
            epoch,
            frac_correct: 0.0,
            frac_memorized: 0.0,
            frac_other: 0.0,
            flipped: 0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.flipped == 0
    }
}

/// Fractions over the samples whose flip mask is set. `epoch` is left at 0.
pub fn memorization_fractions(predictions: &[usize], ds: &LabeledDataset) -> Result<MemorizationRecord> {
    if predictions.len() != ds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} samples",
            predictions.len(),
            ds.len()
        )));
    }
    let (mut correct, mut memorized, mut flipped) = (0usize, 0usize, 0usize);
    for (i, &p) in predictions.iter().enumerate() {
        if !ds.flip_mask()[i] {
            continue;
        }
        flipped += 1;
        if p == ds.true_labels()[i] {
            correct += 1;
        } else if p == ds.given_labels()[i] {
            memorized += 1;
        }
    }
    if flipped == 0 {
        return Ok(MemorizationRecord::empty(0));
    }
    let n = flipped as f64;
    let other = flipped - correct - memorized;
    Ok(MemorizationRecord {
        epoch: 0,
        frac_correct: correct as f64 / n,
        frac_memorized: memorized as f64 / n,
        frac_other: other as f64 / n,
        flipped,
    })
}

/// Fraction of rows whose label ranks among the `k` largest logits.
/// Equal logits rank the lower class index first.
pub fn topk_accuracy(logits: &Tensor, labels: &[usize], k: usize) -> Result<f64> {
    let &[n, classes] = logits.shape() else {
        return Err(Error::Dimension {
            op: "topk_accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    };
    if n != labels.len() {
        return Err(Error::Dimension {
            op: "topk_accuracy",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    if k < 1 || k > classes {
        return Err(Error::contract(format!("k = {k} outside [1, {classes}]")));
    }
    if n == 0 {
        return Err(Error::contract("top-k accuracy of an empty batch"));
    }
    let mut hits = 0usize;
    for (row, &y) in logits.data().chunks(classes).zip(labels) {
        if y >= classes {
            return Err(Error::contract(format!("label {y} outside [0, {classes})")));
        }
        let target = row[y];
        let rank = row
            .iter()
            .enumerate()
            .filter(|&(j, &v)| v > target || (v == target && j < y))
            .count();
        if rank < k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// One epoch of metrics as written to the CSV and JSON logs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub lr: f64,
    pub train_ce: f64,
    pub train_elr: f64,
    pub train_total: f64,
    pub test_ce: f64,
    pub test_total: f64,
    pub top1: f64,
    pub top5: f64,
    pub mem_correct: Option<f64>,
    pub mem_memorized: Option<f64>,
    pub mem_other: Option<f64>,
    pub seconds: Option<f64>,
}

impl MetricsRow {
    pub const HEADER: [&'static str; 13] = [
        "epoch",
        "lr",
        "train_ce",
        "train_elr",
        "train_total",
        "test_ce",
        "test_total",
        "top1",
        "top5",
        "mem_correct",
        "mem_memorized",
        "mem_other",
        "seconds",
    ];

    pub fn set_memorization(&mut self, record: &MemorizationRecord) {
        let (c, m, o) = if record.is_empty() {
            (None, None, None)
        } else {
            (
                Some(record.frac_correct),
                Some(record.frac_memorized),
                Some(record.frac_other),
            )
        };
        self.mem_correct = c;
        self.mem_memorized = m;
        self.mem_other = o;
    }

    pub fn memorization(&self) -> Option<MemorizationRecord> {
        Some(MemorizationRecord {
            epoch: self.epoch,
            frac_correct: self.mem_correct?,
            frac_memorized: self.mem_memorized?,
            frac_other: self.mem_other?,
            flipped: 1,
        })
    }
}
