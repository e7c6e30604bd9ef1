//! SGD with classical momentum and coupled weight decay, and a
//! sharpness-aware (SAM) two-pass wrapper around it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Parameterized};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Gradient norms below this skip the SAM perturbation.
pub const SAM_MIN_GRAD_NORM: f64 = 1e-12;

fn default_momentum() -> f64 {
    0.9
}

fn default_weight_decay() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    /// SAM neighbourhood radius; 0 runs plain SGD.
    #[serde(default)]
    pub sam_rho: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: default_momentum(),
            weight_decay: default_weight_decay(),
            sam_rho: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be >= 0"));
        }
        if !(self.sam_rho >= 0.0) {
            return Err(Error::config("sam_rho must be >= 0"));
        }
        Ok(())
    }
}

/// Momentum buffers plus the SAM scratch copy of the weights.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    buffers: Vec<Tensor>,
    sam_scratch: Option<Vec<Tensor>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, params: &[Parameter]) -> Self {
        OptimizerState {
            config,
            buffers: params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
            sam_scratch: None,
        }
    }

    pub fn momentum_buffers(&self) -> &[Tensor] {
        &self.buffers
    }

    /// True only between the two passes of a SAM step.
    pub fn holds_sam_scratch(&self) -> bool {
        self.sam_scratch.is_some()
    }
}

/// `g' = g + wd·w; v <- μ·v + g'; w <- w - lr·v`.
pub fn sgd_step(params: &mut [Parameter], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::contract(format!("learning rate must be positive, got {lr}")));
    }
    if params.len() != state.buffers.len() {
        return Err(Error::contract("optimizer state built for a different parameter list"));
    }
    if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
        return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
    }
    let OptimizerConfig {
        momentum: mu,
        weight_decay: wd,
        ..
    } = state.config;
    for (p, v) in params.iter_mut().zip(&mut state.buffers) {
        if v.shape() != p.value.shape() {
            return Err(Error::Dimension {
                op: "sgd_step",
                lhs: p.value.shape().to_vec(),
                rhs: v.shape().to_vec(),
            });
        }
        let g = p.grad.as_ref().expect("checked above");
        for ((w, v), &g) in p.value.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *v = mu * *v + (g + wd * *w);
            *w -= lr * *v;
        }
    }
    Ok(())
}

fn global_grad_norm(params: &[Parameter]) -> f64 {
    params
        .iter()
        .filter_map(|p| p.grad.as_ref())
        .flat_map(|g| g.data())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// What a [`sam_step`] did.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamOutcome {
    /// Loss at the unperturbed weights.
    pub loss: f64,
    /// False when the step fell back to plain SGD.
    pub perturbed: bool,
}

/// Sharpness-aware step.
///
/// `loss_fn` evaluates the loss at the model's current weights and fills the
/// parameter gradients (grads are zeroed before each call). The first call
/// gives `g1`; weights move by `ρ·g1/‖g1‖` (global L2 norm), the second call
/// gives `g2`, weights are restored and an SGD step is taken with `g2`.
/// With `ρ = 0` or `‖g1‖ < 1e-12` the step is plain SGD on `g1`.
pub fn sam_step<M, F>(model: &mut M, state: &mut OptimizerState, lr: f64, mut loss_fn: F) -> Result<SamOutcome>
where
    M: Parameterized,
    F: FnMut(&mut M) -> Result<f64>,
{
    let rho = state.config.sam_rho;
    if !(rho >= 0.0) {
        return Err(Error::contract(format!("sam_rho must be >= 0, got {rho}")));
    }
    if state.sam_scratch.is_some() {
        return Err(Error::State("sam_step is not reentrant".into()));
    }
    model.zero_grad();
    let loss = loss_fn(model)?;
    if let Some(p) = model.parameters().iter().find(|p| p.grad.is_none()) {
        return Err(Error::contract(format!("parameter {} has no gradient", p.name)));
    }
    let norm = global_grad_norm(model.parameters());
    if rho == 0.0 || norm < SAM_MIN_GRAD_NORM {
        sgd_step(model.parameters_mut(), state, lr)?;
        return Ok(SamOutcome {
            loss,
            perturbed: false,
        });
    }

    let scale = rho / norm;
    state.sam_scratch = Some(model.parameters().iter().map(|p| p.value.clone()).collect());
    for p in model.parameters_mut() {
        let g = p.grad.take().expect("checked above");
        for (w, g) in p.value.data_mut().iter_mut().zip(g.data()) {
            *w += scale * g;
        }
    }
    let second = loss_fn(model);
    let saved = state.sam_scratch.take().expect("set above");
    for (p, w) in model.parameters_mut().iter_mut().zip(saved) {
        p.value = w;
    }
    second?;
    sgd_step(model.parameters_mut(), state, lr)?;
    Ok(SamOutcome {
        loss,
        perturbed: true,
    })
}
