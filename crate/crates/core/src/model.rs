//! Residual convolutional networks and MLP classifiers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Parameter, Parameterized, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Resnet,
    Mlp,
}

fn default_base_channels() -> usize {
    16
}

/// Architecture description. `input_shape` is `(C, H, W)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    /// Residual blocks per stage; exactly four entries for `resnet`.
    #[serde(default)]
    pub block_counts: Vec<usize>,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    pub num_classes: usize,
    /// Hidden layer widths for `mlp`.
    #[serde(default)]
    pub mlp_hidden: Vec<usize>,
    pub input_shape: [usize; 3],
}

impl ModelConfig {
    pub fn resnet(block_counts: [usize; 4], base_channels: usize, num_classes: usize, input_shape: [usize; 3]) -> Self {
        ModelConfig {
            kind: ModelKind::Resnet,
            block_counts: block_counts.to_vec(),
            base_channels,
            num_classes,
            mlp_hidden: vec![],
            input_shape,
        }
    }

    pub fn mlp(hidden: &[usize], num_classes: usize, input_shape: [usize; 3]) -> Self {
        ModelConfig {
            kind: ModelKind::Mlp,
            block_counts: vec![],
            base_channels: default_base_channels(),
            num_classes,
            mlp_hidden: hidden.to_vec(),
            input_shape,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes must be at least 2"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config("input_shape extents must be positive"));
        }
        match self.kind {
            ModelKind::Resnet => {
                if self.block_counts.len() != 4 {
                    return Err(Error::config(format!(
                        "resnet needs exactly 4 block counts, got {}",
                        self.block_counts.len()
                    )));
                }
                if self.block_counts.contains(&0) || self.base_channels == 0 {
                    return Err(Error::config("block counts and base_channels must be positive"));
                }
            }
            ModelKind::Mlp => {
                if self.mlp_hidden.contains(&0) {
                    return Err(Error::config("mlp hidden widths must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dense {
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: usize,
    gamma: usize,
    beta: usize,
    stats: usize,
    stride: usize,
    pad: usize,
}

#[derive(Debug, Clone)]
struct Block {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

#[derive(Debug, Clone)]
enum Layout {
    Mlp(Vec<Dense>),
    Resnet {
        stem: ConvBn,
        blocks: Vec<Block>,
        head: Dense,
    },
}

/// Parameters of a [`Model`] placed on a particular tape.
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

/// A classifier with a named parameter registry and batch-norm state.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Parameter>,
    stats: Vec<RunningStats>,
    layout: Layout,
    mode: Mode,
    freeze_stats: bool,
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Parameter>,
    stats: Vec<RunningStats>,
}

impl Builder {
    /// Fan-in scaled normal draw, `std = sqrt(2 / fan_in)`.
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(&mut self.rng)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    fn push(&mut self, name: String, value: Tensor) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    fn dense(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Dense {
        let weight = self.kaiming(format!("{prefix}.weight"), &[fan_in, fan_out], fan_in);
        let bias = self.push(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
        Dense { weight, bias }
    }

    fn conv_bn(&mut self, prefix: &str, conv: &str, bn: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvBn {
        let conv = self.kaiming(format!("{prefix}.{conv}.weight"), &[cout, cin, k, k], cin * k * k);
        let gamma = self.push(format!("{prefix}.{bn}.gamma"), Tensor::full(&[cout], 1.0));
        let beta = self.push(format!("{prefix}.{bn}.beta"), Tensor::zeros(&[cout]));
        self.stats.push(RunningStats::identity(cout));
        ConvBn {
            conv,
            gamma,
            beta,
            stats: self.stats.len() - 1,
            stride,
            pad: k / 2,
        }
    }
}

impl Model {
    /// Builds a freshly initialized model. The same seed yields bit-identical
    /// parameters.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            params: Vec::new(),
            stats: Vec::new(),
        };
        let [c, h, w] = config.input_shape;
        let layout = match config.kind {
            ModelKind::Mlp => {
                let mut widths = vec![c * h * w];
                widths.extend(&config.mlp_hidden);
                widths.push(config.num_classes);
                let layers = widths
                    .windows(2)
                    .enumerate()
                    .map(|(i, pair)| b.dense(&format!("fc{i}"), pair[0], pair[1]))
                    .collect();
                Layout::Mlp(layers)
            }
            ModelKind::Resnet => {
                let base = config.base_channels;
                let stem = b.conv_bn("stem", "conv", "bn", c, base, 3, 1);
                let mut blocks = Vec::new();
                let mut cin = base;
                for (stage, &count) in config.block_counts.iter().enumerate() {
                    let cout = base << stage;
                    for i in 0..count {
                        let stride = if i == 0 && stage > 0 { 2 } else { 1 };
                        let prefix = format!("layer{}.{}", stage + 1, i);
                        let first = b.conv_bn(&prefix, "conv1", "bn1", cin, cout, 3, stride);
                        let second = b.conv_bn(&prefix, "conv2", "bn2", cout, cout, 3, 1);
                        let shortcut = (stride != 1 || cin != cout)
                            .then(|| b.conv_bn(&prefix, "shortcut.conv", "shortcut.bn", cin, cout, 1, stride));
                        blocks.push(Block {
                            first,
                            second,
                            shortcut,
                        });
                        cin = cout;
                    }
                }
                let head = b.dense("fc", cin, config.num_classes);
                Layout::Resnet { stem, blocks, head }
            }
        };
        Ok(Model {
            config: config.clone(),
            params: b.params,
            stats: b.stats,
            layout,
            mode: Mode::Train,
            freeze_stats: false,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    /// While frozen, train-mode batch norm still normalizes with batch
    /// statistics but leaves the running averages untouched.
    pub fn set_freeze_running_stats(&mut self, frozen: bool) {
        self.freeze_stats = frozen;
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.stats
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn num_residual_blocks(&self) -> usize {
        match &self.layout {
            Layout::Mlp(_) => 0,
            Layout::Resnet { blocks, .. } => blocks.len(),
        }
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Places every parameter on `tape`, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, track: bool) -> Bound {
        Bound(
            self.params
                .iter()
                .map(|p| {
                    if track {
                        tape.leaf(p.value.clone())
                    } else {
                        tape.constant(p.value.clone())
                    }
                })
                .collect(),
        )
    }

    /// Copies tape gradients of bound parameters into their grad buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, bound: &Bound) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(&bound.0) {
            if let Some(g) = tape.grad(v) {
                p.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Logits `[N, num_classes]` for a `[N, C, H, W]` batch.
    pub fn forward(&mut self, tape: &mut Tape, bound: &Bound, input: Var) -> Result<Var> {
        let shape = tape.value(input).shape().to_vec();
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            let mut expect = vec![shape.first().copied().unwrap_or(0)];
            expect.extend(self.config.input_shape);
            return Err(Error::Dimension {
                op: "model.forward",
                lhs: shape,
                rhs: expect,
            });
        }
        let n = shape[0];
        let p = &bound.0;
        match self.layout.clone() {
            Layout::Mlp(layers) => {
                let flat: usize = self.config.input_shape.iter().product();
                let mut x = tape.reshape(input, &[n, flat])?;
                for (i, layer) in layers.iter().enumerate() {
                    let z = tape.matmul(x, p[layer.weight])?;
                    x = tape.add_bias(z, p[layer.bias])?;
                    if i + 1 < layers.len() {
                        x = tape.relu(x)?;
                    }
                }
                Ok(x)
            }
            Layout::Resnet { stem, blocks, head } => {
                let x = self.conv_bn(tape, bound, &stem, input)?;
                let mut x = tape.relu(x)?;
                for block in &blocks {
                    x = self.block(tape, bound, block, x)?;
                }
                let pooled = tape.global_avg_pool(x)?;
                let z = tape.matmul(pooled, p[head.weight])?;
                tape.add_bias(z, p[head.bias])
            }
        }
    }

    fn conv_bn(&mut self, tape: &mut Tape, bound: &Bound, l: &ConvBn, x: Var) -> Result<Var> {
        let p = &bound.0;
        let y = tape.conv2d(x, p[l.conv], l.stride, l.pad)?;
        if self.freeze_stats || self.mode == Mode::Eval {
            let mut scratch = self.stats[l.stats].clone();
            tape.batch_norm_2d(y, p[l.gamma], p[l.beta], &mut scratch, self.mode)
        } else {
            tape.batch_norm_2d(y, p[l.gamma], p[l.beta], &mut self.stats[l.stats], self.mode)
        }
    }

    /// conv-BN-ReLU-conv-BN, plus the (possibly projected) input, then ReLU.
    fn block(&mut self, tape: &mut Tape, bound: &Bound, block: &Block, x: Var) -> Result<Var> {
        let y = self.conv_bn(tape, bound, &block.first, x)?;
        let y = tape.relu(y)?;
        let y = self.conv_bn(tape, bound, &block.second, y)?;
        let skip = match &block.shortcut {
            Some(proj) => self.conv_bn(tape, bound, proj, x)?,
            None => x,
        };
        let sum = tape.add(y, skip)?;
        tape.relu(sum)
    }

    /// Untracked forward pass over `images` in chunks of `batch_size`,
    /// concatenating the logits. Uses the current mode.
    pub fn predict(&mut self, images: &Tensor, batch_size: usize) -> Result<Tensor> {
        let n = images.shape()[0];
        let k = self.config.num_classes;
        let mut out = Vec::with_capacity(n * k);
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(batch_size.max(1)) {
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(images.select_rows(chunk));
            let logits = self.forward(&mut tape, &bound, x)?;
            out.extend_from_slice(tape.value(logits).data());
        }
        Tensor::new(vec![n, k], out)
    }

    /// Reassembles a model from stored parts, checking names and shapes
    /// against a fresh build of `config`.
    pub fn from_parts(config: &ModelConfig, params: Vec<Parameter>, stats: Vec<RunningStats>) -> Result<Self> {
        let mut model = Model::build(config, 0)?;
        if params.len() != model.params.len() || stats.len() != model.stats.len() {
            return Err(Error::config("stored parameters do not match the model config"));
        }
        for (fresh, stored) in model.params.iter().zip(&params) {
            if fresh.name != stored.name || fresh.value.shape() != stored.value.shape() {
                return Err(Error::config(format!(
                    "stored parameter {} {:?} does not match {} {:?}",
                    stored.name,
                    stored.value.shape(),
                    fresh.name,
                    fresh.value.shape()
                )));
            }
        }
        for (fresh, stored) in model.stats.iter().zip(&stats) {
            if fresh.channels() != stored.channels() || stored.var.len() != stored.channels() {
                return Err(Error::config("stored batch-norm stats do not match the model config"));
            }
        }
        model.params = params;
        model.stats = stats;
        Ok(model)
    }
}

impl Parameterized for Model {
    fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }
}
