use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{ExperimentConfig, LossSpec};
use super::metrics::{write_json, write_summary, CsvLog, Summary};
use crate::autodiff::{Mode, Parameterized, Tape};
use crate::data::{augment_batch, channel_stats, normalize, AugmentSpec, LabeledDataset};
use crate::diagnostics::{memorization_fractions, topk_accuracy, MemorizationRecord, MetricsRow};
use crate::error::{Error, Result};
use crate::loss::{cross_entropy, cross_entropy_value, elr_loss, elr_term_value, LossValue, TargetStore};
use crate::model::{Model, ModelKind};
use crate::optim::{sam_step, sgd_step, OptimizerState};
use crate::tensor::{softmax_rows, Tensor};

const EVAL_BATCH: usize = 500;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const SUMMARY_JSON: &str = "summary.json";
pub const CONFIG_TOML: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "final.ckpt";

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub metrics: Vec<MetricsRow>,
    pub final_top1: f64,
    pub final_top5: f64,
    pub checkpoint: PathBuf,
}

impl RunResult {
    pub fn final_row(&self) -> &MetricsRow {
        self.metrics.last().expect("baseline row always present")
    }
}

/// Eval-mode measurements on both splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub train_ce: f64,
    pub train_elr: f64,
    pub train_total: f64,
    pub test_ce: f64,
    pub test_total: f64,
    pub top1: f64,
    pub top5: f64,
    pub memorization: MemorizationRecord,
}

/// Input scaling shared by the train and eval pipelines.
#[derive(Debug, Clone)]
pub struct Preprocess {
    augment: Option<AugmentSpec>,
}

impl Preprocess {
    pub fn new(config: &ExperimentConfig, train: &LabeledDataset) -> Result<Self> {
        let Some(a) = &config.augment else {
            return Ok(Preprocess { augment: None });
        };
        let (mean, std) = match (&a.mean, &a.std) {
            (Some(m), Some(s)) => (m.clone(), s.clone()),
            (m, s) => {
                let (cm, cs) = channel_stats(train.images())?;
                (m.clone().unwrap_or(cm), s.clone().unwrap_or(cs))
            }
        };
        let spec = AugmentSpec {
            mean,
            std,
            crop_pad: a.crop_pad,
            hflip_prob: a.hflip_prob,
        };
        spec.validate(train.image_shape()[0])?;
        Ok(Preprocess { augment: Some(spec) })
    }

    /// Normalization only.
    pub fn eval(&self, images: &Tensor) -> Result<Tensor> {
        match &self.augment {
            Some(a) => normalize(images, &a.mean, &a.std),
            None => Ok(images.clone()),
        }
    }

    fn train(&self, images: Tensor, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        match &self.augment {
            Some(a) => augment_batch(&images, a, rng),
            None => Ok(images),
        }
    }
}

/// Eval-mode metrics. `train_images`/`test_images` are already preprocessed.
/// Test targets are never updated, so the test regularizer term is zero and
/// `test_total == test_ce`.
pub fn evaluate(
    model: &mut Model,
    loss: &LossSpec,
    targets: Option<&TargetStore>,
    train: &LabeledDataset,
    train_images: &Tensor,
    test: &LabeledDataset,
    test_images: &Tensor,
) -> Result<Evaluation> {
    let previous = model.mode();
    model.set_mode(Mode::Eval);
    let train_logits = model.predict(train_images, EVAL_BATCH);
    let test_logits = model.predict(test_images, EVAL_BATCH);
    model.set_mode(previous);
    let (train_logits, test_logits) = (train_logits?, test_logits?);

    let k = train.num_classes();
    let train_ce = cross_entropy_value(&train_logits, train.given_labels())?;
    let (train_elr, train_total) = match (loss, targets) {
        (LossSpec::Elr { lambda, .. }, Some(store)) => {
            let probs = Tensor::new(train_logits.shape().to_vec(), softmax_rows(train_logits.data(), k))?;
            let elr = elr_term_value(&probs, &store.gather(train.sample_ids())?)?;
            (elr, train_ce + lambda * elr)
        }
        _ => (0.0, train_ce),
    };
    let test_ce = cross_entropy_value(&test_logits, test.true_labels())?;
    let mut memorization = memorization_fractions(&train_logits.argmax_rows(), train)?;
    memorization.epoch = 0;
    Ok(Evaluation {
        train_ce,
        train_elr,
        train_total,
        test_ce,
        test_total: test_ce,
        top1: topk_accuracy(&test_logits, test.true_labels(), 1)?,
        top5: topk_accuracy(&test_logits, test.true_labels(), 5.min(k))?,
        memorization,
    })
}

/// One forward/backward pass on a batch; fills the model's gradients.
/// ELR targets are refreshed from this pass's probabilities first when
/// `update_targets` is set.
fn loss_and_grad(
    model: &mut Model,
    images: &Tensor,
    labels: &[usize],
    ids: &[usize],
    loss: &LossSpec,
    store: Option<&mut TargetStore>,
    update_targets: bool,
) -> Result<LossValue> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let x = tape.constant(images.clone());
    let logits = model.forward(&mut tape, &bound, x)?;
    let (total, value) = match (loss, store) {
        (LossSpec::Ce, _) => {
            let ce = cross_entropy(&mut tape, logits, labels)?;
            let v = tape.value(ce).item()?;
            (
                ce,
                LossValue {
                    total: v,
                    ce: v,
                    elr: 0.0,
                    lambda: 0.0,
                },
            )
        }
        (LossSpec::Elr { lambda, .. }, Some(store)) => {
            if update_targets {
                let lv = tape.value(logits);
                let probs = Tensor::new(lv.shape().to_vec(), softmax_rows(lv.data(), lv.shape()[1]))?;
                store.update(ids, &probs)?;
            }
            let out = elr_loss(&mut tape, logits, labels, store, ids, *lambda)?;
            (out.total, out.value)
        }
        (LossSpec::Elr { .. }, None) => return Err(Error::State("elr loss without a target store".into())),
    };
    if !value.total.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    tape.backward(total)?;
    model.accumulate_grads(&tape, &bound)?;
    Ok(value)
}

/// Mutable state of a run in progress.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: Model,
    pub optimizer: OptimizerState,
    pub targets: Option<TargetStore>,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    preprocess: Preprocess,
    train_eval_images: Tensor,
    test_eval_images: Tensor,
    shuffle_rng: ChaCha8Rng,
    augment_rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (train, test) = config.prepare_data()?;
        let model = Model::build(&config.model_config(), config.run_seed)?;
        let optimizer = OptimizerState::new(config.optimizer, model.parameters());
        let targets = match config.loss {
            LossSpec::Elr { beta, .. } => Some(TargetStore::new(train.sample_ids(), train.num_classes(), beta)?),
            LossSpec::Ce => None,
        };
        let preprocess = Preprocess::new(config, &train)?;
        let train_eval_images = preprocess.eval(train.images())?;
        let test_eval_images = preprocess.eval(test.images())?;
        let shuffle_rng = ChaCha8Rng::seed_from_u64(config.run_seed);
        let mut augment_rng = ChaCha8Rng::seed_from_u64(config.run_seed);
        augment_rng.set_stream(1);
        Ok(Trainer {
            config: config.clone(),
            model,
            optimizer,
            targets,
            train,
            test,
            preprocess,
            train_eval_images,
            test_eval_images,
            shuffle_rng,
            augment_rng,
            epoch: 0,
        })
    }

    /// Number of completed training epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn evaluate(&mut self) -> Result<Evaluation> {
        let mut ev = evaluate(
            &mut self.model,
            &self.config.loss,
            self.targets.as_ref(),
            &self.train,
            &self.train_eval_images,
            &self.test,
            &self.test_eval_images,
        )?;
        ev.memorization.epoch = self.epoch;
        Ok(ev)
    }

    /// Metrics row for the current state, using the learning rate of the
    /// epoch just completed (or of epoch 0 for the baseline).
    pub fn metrics_row(&mut self, seconds: Option<f64>) -> Result<MetricsRow> {
        let ev = self.evaluate()?;
        let mut row = MetricsRow {
            epoch: self.epoch,
            lr: self.config.schedule.lr_at(self.epoch.saturating_sub(1)),
            train_ce: ev.train_ce,
            train_elr: ev.train_elr,
            train_total: ev.train_total,
            test_ce: ev.test_ce,
            test_total: ev.test_total,
            top1: ev.top1,
            top5: ev.top5,
            mem_correct: None,
            mem_memorized: None,
            mem_other: None,
            seconds,
        };
        row.set_memorization(&ev.memorization);
        Ok(row)
    }

    /// Trains one epoch over a fresh shuffle of the train split.
    pub fn train_epoch(&mut self) -> Result<()> {
        let epoch = self.epoch + 1;
        let lr = self.config.schedule.lr_at(self.epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let has_bn = self.model.config().kind == ModelKind::Resnet;
        for (step, chunk) in order.chunks(self.config.batch_size).enumerate() {
            // batch statistics are undefined for a single sample
            if has_bn && chunk.len() < 2 {
                continue;
            }
            self.train_step(chunk, lr).map_err(|e| match e {
                Error::NonFinite { op } => Error::Numerical {
                    epoch,
                    step,
                    msg: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
        }
        self.epoch = epoch;
        Ok(())
    }

    fn train_step(&mut self, chunk: &[usize], lr: f64) -> Result<LossValue> {
        let images = self.preprocess.train(self.train.images().select_rows(chunk), &mut self.augment_rng)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| self.train.given_labels()[i]).collect();
        let ids: Vec<usize> = chunk.iter().map(|&i| self.train.sample_ids()[i]).collect();
        let loss = self.config.loss;

        if self.optimizer.config.sam_rho == 0.0 {
            self.model.zero_grad();
            let v = loss_and_grad(&mut self.model, &images, &labels, &ids, &loss, self.targets.as_mut(), true)?;
            sgd_step(self.model.parameters_mut(), &mut self.optimizer, lr)?;
            return Ok(v);
        }

        let mut calls = 0;
        let mut first = None;
        let targets = &mut self.targets;
        let outcome = sam_step(&mut self.model, &mut self.optimizer, lr, |m| {
            calls += 1;
            let phase1 = calls == 1;
            // the perturbed pass must not move the BN running stats or the targets
            m.set_freeze_running_stats(!phase1);
            let v = loss_and_grad(m, &images, &labels, &ids, &loss, targets.as_mut(), phase1)?;
            if phase1 {
                first = Some(v);
            }
            Ok(v.total)
        });
        self.model.set_freeze_running_stats(false);
        outcome?;
        Ok(first.expect("first pass ran"))
    }
}

/// Trains per `config`, writing `metrics.csv` (row by row), `metrics.json`,
/// `summary.json`, `config.toml` and `final.ckpt` under `output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunResult> {
    let mut trainer = Trainer::new(config)?;
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let toml = config.to_toml_string()?;
    std::fs::write(dir.join(CONFIG_TOML), toml).map_err(|e| Error::io(dir.join(CONFIG_TOML), e))?;

    let start = Instant::now();
    let clock = |start: &Instant| config.record_wall_time.then(|| start.elapsed().as_secs_f64());
    let mut log = CsvLog::create(&dir.join(METRICS_CSV))?;
    let mut metrics = Vec::with_capacity(config.epochs + 1);

    let row = trainer.metrics_row(clock(&start))?;
    log.push(&row)?;
    metrics.push(row);
    for _ in 0..config.epochs {
        trainer.train_epoch()?;
        let row = trainer.metrics_row(clock(&start))?;
        if !(row.train_total.is_finite() && row.test_ce.is_finite()) {
            return Err(Error::Numerical {
                epoch: trainer.epoch(),
                step: 0,
                msg: "non-finite evaluation loss".into(),
            });
        }
        log.push(&row)?;
        metrics.push(row);
    }

    let checkpoint = dir.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &trainer.model, trainer.targets.as_ref(), trainer.epoch())?;
    write_json(&dir.join(METRICS_JSON), &metrics)?;
    let last = metrics.last().expect("baseline row");
    let result = RunResult {
        config: config.clone(),
        config_hash: config.hash(),
        final_top1: last.top1,
        final_top5: last.top5,
        metrics,
        checkpoint,
    };
    write_summary(
        &dir.join(SUMMARY_JSON),
        &Summary {
            config_hash: result.config_hash.clone(),
            epochs: config.epochs,
            final_top1: result.final_top1,
            final_top5: result.final_top5,
            final_mem_memorized: result.final_row().mem_memorized,
            config: config.clone(),
        },
    )?;
    Ok(result)
}
