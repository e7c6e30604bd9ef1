//! Cross-entropy and the early-learning regularized objective.
//!
//! The regularizer is `λ · mean_i log(1 - <p_i, t_i>)` where `p_i` is the
//! softmax output for sample `i` and `t_i` is a per-sample exponential moving
//! average of past softmax outputs kept in a [`TargetStore`]. Targets are
//! data: no gradient flows into them.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{log_sum_exp, Tensor};

/// Clamp margin keeping `1 - <p, t>` away from zero.
pub const ELR_CLAMP_EPS: f64 = 1e-4;

/// Per-sample moving-average probability targets, keyed by stable sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetStore {
    ids: Vec<usize>,
    index: HashMap<usize, usize>,
    num_classes: usize,
    beta: f64,
    targets: Vec<f64>,
}

impl TargetStore {
    /// Zero-initialized targets for every id in `ids`.
    pub fn new(ids: &[usize], num_classes: usize, beta: f64) -> Result<Self> {
        let targets = vec![0.0; ids.len() * num_classes];
        TargetStore::from_parts(ids.to_vec(), num_classes, beta, targets)
    }

    pub fn from_parts(ids: Vec<usize>, num_classes: usize, beta: f64, targets: Vec<f64>) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::contract(format!("beta {beta} outside [0, 1]")));
        }
        if num_classes == 0 || targets.len() != ids.len() * num_classes {
            return Err(Error::contract("target buffer does not match ids x classes"));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            if index.insert(id, row).is_some() {
                return Err(Error::contract(format!("duplicate sample id {id}")));
            }
        }
        Ok(TargetStore {
            ids,
            index,
            num_classes,
            beta,
            targets,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Flat `[len, num_classes]` target buffer in `ids()` order.
    pub fn data(&self) -> &[f64] {
        &self.targets
    }

    fn row_of(&self, id: usize) -> Result<usize> {
        self.index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::contract(format!("unknown sample id {id}")))
    }

    pub fn target(&self, id: usize) -> Result<&[f64]> {
        let row = self.row_of(id)?;
        let k = self.num_classes;
        Ok(&self.targets[row * k..(row + 1) * k])
    }

    /// Targets for `ids` stacked into `[ids.len(), num_classes]`.
    pub fn gather(&self, ids: &[usize]) -> Result<Tensor> {
        let mut data = Vec::with_capacity(ids.len() * self.num_classes);
        for &id in ids {
            data.extend_from_slice(self.target(id)?);
        }
        Tensor::new(vec![ids.len(), self.num_classes], data)
    }

    /// `t_i <- β t_i + (1 - β) p_i` for each id and matching row of `probs`.
    pub fn update(&mut self, ids: &[usize], probs: &Tensor) -> Result<()> {
        let k = self.num_classes;
        if probs.shape() != [ids.len(), k] {
            return Err(Error::Dimension {
                op: "update_targets",
                lhs: probs.shape().to_vec(),
                rhs: vec![ids.len(), k],
            });
        }
        let rows: Vec<usize> = ids.iter().map(|&id| self.row_of(id)).collect::<Result<_>>()?;
        for (i, p) in probs.data().chunks(k).enumerate() {
            let sum: f64 = p.iter().sum();
            if p.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!("row {i} is not a probability vector")));
            }
        }
        let beta = self.beta;
        for (&row, p) in rows.iter().zip(probs.data().chunks(k)) {
            for (t, &q) in self.targets[row * k..(row + 1) * k].iter_mut().zip(p) {
                *t = beta * *t + (1.0 - beta) * q;
            }
        }
        Ok(())
    }
}

/// Scalar breakdown of a loss evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub ce: f64,
    /// Unweighted regularizer `mean log(1 - <p, t>)`; always `<= 0`.
    pub elr: f64,
    pub lambda: f64,
}

/// Mean cross-entropy of `labels` under `softmax(logits)`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Output of [`elr_loss`]: the differentiable total plus its breakdown.
#[derive(Debug, Clone, Copy)]
pub struct ElrLoss {
    pub total: Var,
    pub value: LossValue,
}

/// Cross-entropy plus `λ · mean log(1 - clamp(<p, t>, 0, 1 - ε))`.
///
/// With `λ = 0` the returned `total` is the cross-entropy node itself, so
/// both the value and the gradient are bit-identical to plain cross-entropy.
pub fn elr_loss(
    tape: &mut Tape,
    logits: Var,
    labels: &[usize],
    store: &TargetStore,
    ids: &[usize],
    lambda: f64,
) -> Result<ElrLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::contract(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    let n = tape.value(logits).shape()[0];
    if ids.len() != n {
        return Err(Error::Dimension {
            op: "elr_loss",
            lhs: tape.value(logits).shape().to_vec(),
            rhs: vec![ids.len()],
        });
    }
    let targets = store.gather(ids)?;
    let ce = tape.cross_entropy(logits, labels)?;
    let probs = tape.softmax(logits)?;
    let inner = tape.row_dot_const(probs, &targets)?;
    let log_term = tape.log1m_clamped(inner, ELR_CLAMP_EPS)?;
    let reg = tape.mean(log_term)?;

    let ce_value = tape.value(ce).item()?;
    let elr_value = tape.value(reg).item()?;
    let total = if lambda == 0.0 {
        ce
    } else {
        let weighted = tape.scale(reg, lambda)?;
        tape.add(ce, weighted)?
    };
    Ok(ElrLoss {
        total,
        value: LossValue {
            total: tape.value(total).item()?,
            ce: ce_value,
            elr: elr_value,
            lambda,
        },
    })
}

/// Moving-average update of the stored targets from this batch's probabilities.
pub fn update_targets(store: &mut TargetStore, ids: &[usize], probs: &Tensor) -> Result<()> {
    store.update(ids, probs)
}

/// Mean cross-entropy computed directly on values, without a tape.
pub fn cross_entropy_value(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let &[n, k] = logits.shape() else {
        return Err(Error::Dimension {
            op: "cross_entropy_value",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    };
    if n != labels.len() || n == 0 {
        return Err(Error::Dimension {
            op: "cross_entropy_value",
            lhs: logits.shape().to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let mut sum = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::contract(format!("label {y} outside [0, {k})")));
        }
        sum += log_sum_exp(row) - row[y];
    }
    Ok(sum / n as f64)
}

/// Unweighted regularizer `mean log(1 - clamp(<p, t>))` on values.
pub fn elr_term_value(probs: &Tensor, targets: &Tensor) -> Result<f64> {
    if probs.shape() != targets.shape() || probs.ndim() != 2 || probs.shape()[0] == 0 {
        return Err(Error::Dimension {
            op: "elr_term_value",
            lhs: probs.shape().to_vec(),
            rhs: targets.shape().to_vec(),
        });
    }
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let sum: f64 = probs
        .data()
        .chunks(k)
        .zip(targets.data().chunks(k))
        .map(|(p, t)| {
            let dot: f64 = p.iter().zip(t).map(|(a, b)| a * b).sum();
            (1.0 - dot.clamp(0.0, 1.0 - ELR_CLAMP_EPS)).ln()
        })
        .sum();
    Ok(sum / n as f64)
}
