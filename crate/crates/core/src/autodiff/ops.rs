use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, log_sum_exp, softmax_rows, Tensor};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

impl Tape {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let dims_err = || Error::Dimension {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let ((m, k), (k2, n)) = match (matrix_dims("matmul", ta), matrix_dims("matmul", tb)) {
            (Ok(x), Ok(y)) => (x, y),
            _ => return Err(dims_err()),
        };
        if k != k2 {
            return Err(dims_err());
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Add { a, b }, &[a, b], "add")
    }

    /// `[N, K] + [K]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, k) = matrix_dims("add_bias", tx)?;
        if tb.shape() != [k] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(k) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, Op::Mul { a, b }, &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Scale { x, factor }, &[x], "scale")
    }

    /// Sum of all entries, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x], "sum")
    }

    /// Mean of all entries, as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let m = tx.data().iter().sum::<f64>() / tx.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean { x }, &[x], "mean")
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Relu { x }, &[x], "relu")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x }, &[x], "reshape")
    }

    /// Row-wise softmax of `[N, K]` logits.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (_, k) = matrix_dims("softmax", tx)?;
        if k < 2 {
            return Err(Error::contract("softmax needs at least 2 classes"));
        }
        let t = Tensor::new(tx.shape().to_vec(), softmax_rows(tx.data(), k))?;
        self.push(t, Op::Softmax { x }, &[x], "softmax")
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let &[n, c, h, w] = tx.shape() else {
            return Err(Error::Dimension {
                op: "global_avg_pool",
                lhs: tx.shape().to_vec(),
                rhs: vec![],
            });
        };
        let spatial = h * w;
        let data = tx
            .data()
            .chunks(spatial)
            .map(|plane| plane.iter().sum::<f64>() / spatial as f64)
            .collect();
        let t = Tensor::new(vec![n, c], data)?;
        self.push(t, Op::GlobalAvgPool { x, spatial }, &[x], "global_avg_pool")
    }

    /// Per-row inner product of `[N, K]` `x` with a constant `[N, K]` matrix.
    pub fn row_dot_const(&mut self, x: Var, weights: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        same_shape("row_dot", tx, weights)?;
        let (_, k) = matrix_dims("row_dot", tx)?;
        let data = tx
            .data()
            .chunks(k)
            .zip(weights.data().chunks(k))
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum())
            .collect::<Vec<f64>>();
        let t = Tensor::new(vec![data.len()], data)?;
        let op = Op::RowDot {
            x,
            weights: weights.data().to_vec(),
        };
        self.push(t, op, &[x], "row_dot")
    }

    /// Elementwise `ln(1 - clamp(x, 0, 1 - eps))`. The clamp has zero
    /// derivative outside `[0, 1 - eps]`.
    pub fn log1m_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| (1.0 - v.clamp(0.0, 1.0 - eps)).ln())
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(t, Op::Log1mClamped { x, eps }, &[x], "log1m_clamped")
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (n, k) = matrix_dims("cross_entropy", tl)?;
        if labels.len() != n {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: tl.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::contract(format!("label {bad} outside [0, {k})")));
        }
        let loss = tl
            .data()
            .chunks(k)
            .zip(labels)
            .map(|(row, &y)| log_sum_exp(row) - row[y])
            .sum::<f64>()
            / n as f64;
        let probs = softmax_rows(tl.data(), k);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits], "cross_entropy")
    }

    /// Applies the backward rule of record `id` given its output gradient.
    pub(super) fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                // dA = dC * B^T
                self.accumulate(grads, *a, |da| gemm(m, n, k, g, false, tb.data(), true, da, 1.0));
                // dB = A^T * dC
                self.accumulate(grads, *b, |db| gemm(k, m, n, ta.data(), true, g, false, db, 1.0));
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    self.accumulate(grads, v, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::AddBias { x, bias } => {
                let k = self.value(*bias).numel();
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                self.accumulate(grads, *bias, |d| {
                    for row in g.chunks(k) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(tb.data()) {
                        *d += g * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(ta.data()) {
                        *d += g * x;
                    }
                });
            }
            Op::Scale { x, factor } => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += factor * g));
            }
            Op::Sum { x } => {
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0]));
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0] / n));
            }
            Op::Relu { x } => {
                let tx = self.value(*x);
                self.accumulate(grads, *x, |d| {
                    for ((d, g), v) in d.iter_mut().zip(g).zip(tx.data()) {
                        if *v > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::Reshape { x } => {
                self.accumulate(grads, *x, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
            }
            Op::Softmax { x } => {
                let y = &self.nodes[id].value;
                let k = y.shape()[1];
                self.accumulate(grads, *x, |d| {
                    for ((d, g), y) in d.chunks_mut(k).zip(g.chunks(k)).zip(y.data().chunks(k)) {
                        let dot: f64 = g.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::GlobalAvgPool { x, spatial } => {
                let s = *spatial;
                self.accumulate(grads, *x, |d| {
                    for (plane, g) in d.chunks_mut(s).zip(g) {
                        plane.iter_mut().for_each(|d| *d += g / s as f64);
                    }
                });
            }
            Op::RowDot { x, weights } => {
                let k = weights.len() / g.len();
                self.accumulate(grads, *x, |d| {
                    for ((d, w), g) in d.chunks_mut(k).zip(weights.chunks(k)).zip(g) {
                        d.iter_mut().zip(w).for_each(|(d, w)| *d += g * w);
                    }
                });
            }
            Op::Log1mClamped { x, eps } => {
                let tx = self.value(*x);
                let hi = 1.0 - eps;
                self.accumulate(grads, *x, |d| {
                    for ((d, g), &v) in d.iter_mut().zip(g).zip(tx.data()) {
                        if (0.0..=hi).contains(&v) {
                            *d -= g / (1.0 - v);
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = g[0] / n as f64;
                self.accumulate(grads, *logits, |d| {
                    for (i, (d, p)) in d.chunks_mut(k).zip(probs.chunks(k)).enumerate() {
                        for j in 0..k {
                            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
                            d[j] += scale * (p[j] - onehot);
                        }
                    }
                });
            }
            Op::Conv2d { .. } => self.conv2d_backward(id, g, grads),
            Op::BatchNorm { .. } => self.batch_norm_backward(id, g, grads),
        }
    }
}
