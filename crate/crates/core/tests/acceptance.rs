//! Acceptance checks. Each test prints one `PASS`/`FAIL` line with the
//! measured values, then asserts. Run with
//! `cargo test -p elr-core --test acceptance -- --nocapture --test-threads=1`.

mod common;

use std::time::Instant;

use elr_core::autodiff::{check_gradients, GradCheck, Mode, Parameter, Parameterized, RunningStats, Tape, Var};
use elr_core::data::{inject_symmetric_noise, LabeledDataset, NoiseSpec};
use elr_core::diagnostics::memorization_fractions;
use elr_core::harness::{profiles, run_experiment, LossSpec, METRICS_CSV};
use elr_core::loss::{cross_entropy, elr_loss, update_targets, TargetStore};
use elr_core::model::{Model, ModelConfig};
use elr_core::optim::{sam_step, sgd_step, OptimizerConfig, OptimizerState};
use elr_core::schedule::{cosine_lr, multistep_lr, ScheduleConfig};
use elr_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(id: u32, name: &str, pass: bool, detail: String) {
    println!("{} {id} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {id} ({name}) failed: {detail}");
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- 1

/// Smallest |pre-activation| entering the relu at this point.
fn relu_margin(x: &Tensor, theta: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let input = tape.constant(x.clone());
    let v: Vec<Var> = theta.iter().map(|t| tape.constant(t.clone())).collect();
    let mut stats = RunningStats::identity(3);
    let h = tape.conv2d(input, v[0], 1, 0).unwrap();
    let z = tape.batch_norm_2d(h, v[1], v[2], &mut stats, Mode::Train).unwrap();
    tape.value(z).data().iter().fold(f64::INFINITY, |m, z| m.min(z.abs()))
}

#[test]
fn c1_gradients_match_finite_differences() {
    // a pre-activation within a few h of 0 puts the central difference across
    // the relu kink, so points are redrawn until every one clears this margin
    const KINK_MARGIN: f64 = 0.02;
    let start = Instant::now();
    let (n, k) = (4, 3);
    let ids: Vec<usize> = (0..n).collect();
    let labels = vec![0, 2, 1, 2];
    let mut worst: f64 = 0.0;
    let mut param_count = 0;
    let mut redraws = 0;
    for seed in 0..5u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, theta) = loop {
            let x = uniform(&mut rng, &[n, 2, 4, 4], 1.0);
            // conv kernel, BN gamma/beta, dense weight and bias
            let theta = vec![
                uniform(&mut rng, &[3, 2, 3, 3], 0.5),
                Tensor::new(vec![3], (0..3).map(|_| rng.random_range(0.5..1.5)).collect()).unwrap(),
                uniform(&mut rng, &[3], 0.3),
                uniform(&mut rng, &[3, k], 1.0),
                uniform(&mut rng, &[k], 0.3),
            ];
            if relu_margin(&x, &theta) >= KINK_MARGIN {
                break (x, theta);
            }
            redraws += 1;
        };
        param_count = theta.iter().map(Tensor::numel).sum::<usize>();
        let mut store = TargetStore::new(&ids, k, 0.7).unwrap();
        let probs = Tensor::new(vec![n, k], (0..n * k).map(|_| rng.random_range(0.05..1.0)).collect()).unwrap();
        let row_sums: Vec<f64> = (0..n).map(|i| probs.row(i).iter().sum()).collect();
        let probs = Tensor::new(
            vec![n, k],
            probs.data().iter().enumerate().map(|(j, p)| p / row_sums[j / k]).collect(),
        )
        .unwrap();
        update_targets(&mut store, &ids, &probs).unwrap();

        let mut stats = RunningStats::identity(3);
        let f = |tape: &mut Tape, v: &[Var]| -> Result<Var> {
            let input = tape.constant(x.clone());
            let h = tape.conv2d(input, v[0], 1, 0)?;
            let h = tape.batch_norm_2d(h, v[1], v[2], &mut stats, Mode::Train)?;
            let h = tape.relu(h)?;
            let h = tape.global_avg_pool(h)?;
            let h = tape.matmul(h, v[3])?;
            let logits = tape.add_bias(h, v[4])?;
            Ok(elr_loss(tape, logits, &labels, &store, &ids, 3.0)?.total)
        };
        let err = check_gradients(f, &theta, GradCheck { step: 1e-3, max_coords: None, seed }).unwrap();
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient check",
        worst < 1e-4 && secs < 30.0 && param_count <= 1000,
        format!(
            "max rel err {worst:.2e} (< 1e-4) over 5 seeds, {param_count} params, {redraws} redraws near relu kinks, {secs:.2}s (< 30s)"
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn c2_elr_closed_forms() {
    let p = Tensor::new(vec![2, 4], vec![0.1, 0.2, 0.3, 0.4, 0.7, 0.1, 0.1, 0.1]).unwrap();
    let ids = [3, 9];
    let mut worst: f64 = 0.0;
    for beta in [0.7, 0.85, 0.9] {
        let mut store = TargetStore::new(&ids, 4, beta).unwrap();
        for step in 1..=50 {
            update_targets(&mut store, &ids, &p).unwrap();
            let decay = 1.0 - f64::powi(beta, step);
            let t = store.gather(&ids).unwrap();
            for (got, want) in t.data().iter().zip(p.data()) {
                worst = worst.max((got - decay * want).abs());
            }
        }
    }

    // λ = 0 against plain cross-entropy, value and gradient
    let logits = Tensor::new(vec![2, 4], vec![0.3, -1.2, 2.0, 0.1, 1.5, 0.0, -0.4, 0.9]).unwrap();
    let labels = [2, 0];
    let mut store = TargetStore::new(&ids, 4, 0.7).unwrap();
    update_targets(&mut store, &ids, &p).unwrap();
    let run = |use_elr: bool| {
        let mut tape = Tape::new();
        let z = tape.leaf(logits.clone());
        let loss = if use_elr {
            elr_loss(&mut tape, z, &labels, &store, &ids, 0.0).unwrap().total
        } else {
            cross_entropy(&mut tape, z, &labels).unwrap()
        };
        tape.backward(loss).unwrap();
        (tape.value(loss).item().unwrap(), tape.grad(z).unwrap().clone())
    };
    let (ce, elr0) = (run(false), run(true));
    let bit_exact = ce.0.to_bits() == elr0.0.to_bits()
        && ce.1.data().iter().zip(elr0.1.data()).all(|(a, b)| a.to_bits() == b.to_bits());

    // <p, t> = 1: a saturated prediction agreeing with a one-hot target
    let sat = Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap();
    let one_hot = TargetStore::from_parts(vec![0], 2, 0.7, vec![1.0, 0.0]).unwrap();
    let mut tape = Tape::new();
    let z = tape.leaf(sat);
    let clamped = elr_loss(&mut tape, z, &[0], &one_hot, &[0], 3.0).unwrap();
    tape.backward(clamped.total).unwrap();
    let finite = clamped.value.total.is_finite() && tape.grad(z).unwrap().is_finite();

    report(
        2,
        "ELR closed forms",
        worst <= 1e-12 && bit_exact && finite,
        format!(
            "target max |err| {worst:.1e} (<= 1e-12), lambda=0 bit-exact {bit_exact}, clamp loss {:.4} finite {finite}",
            clamped.value.total
        ),
    );
}

// ---------------------------------------------------------------- 3

#[test]
fn c3_schedules() {
    let mut cos_err: f64 = 0.0;
    for t_max in [10, 100] {
        cos_err = cos_err.max((cosine_lr(0.001, 0.02, t_max, 0) - 0.02).abs());
        cos_err = cos_err.max((cosine_lr(0.001, 0.02, t_max, t_max) - 0.001).abs());
        cos_err = cos_err.max((cosine_lr(0.001, 0.02, t_max, t_max / 2) - 0.0105).abs());
    }

    let mut step_err: f64 = 0.0;
    for (milestones, factor) in [(vec![40, 80], 10.0), (vec![80, 120], 10.0), (vec![30, 60, 90], 5.0)] {
        let cfg = ScheduleConfig::Multistep {
            base_lr: 0.02,
            milestones: milestones.clone(),
            decay_factor: factor,
        };
        for epoch in 0..=150 {
            let passed = milestones.iter().filter(|&&m| epoch >= m).count();
            let mut want = 0.02;
            for _ in 0..passed {
                want /= factor;
            }
            let got = cfg.lr_at(epoch);
            step_err = step_err.max(((got - want) / want).abs());
            step_err = step_err.max(((multistep_lr(0.02, &milestones, factor, epoch) - want) / want).abs());
        }
    }
    report(
        3,
        "scheduler values",
        cos_err <= 1e-12 && step_err <= 1e-12,
        format!("cosine max |err| {cos_err:.1e} (<= 1e-12), multistep max rel err {step_err:.1e} over epochs 0-150"),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c4_noise_accounting() {
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    let k = 10;
    let n = 10_000;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let clean = LabeledDataset::clean(Tensor::zeros(&[n, 1, 1, 1]), labels, k).unwrap();
    let mut lines = Vec::new();
    let mut pass = true;
    for (rate, seed) in [(0.1, 1), (0.15, 2), (0.2, 3)] {
        let noisy = inject_symmetric_noise(&clean, &NoiseSpec { rate, seed }).unwrap();
        let expected = (rate * n as f64).round() as usize;
        let mut cells = vec![0usize; k * k];
        let mut self_flips = 0;
        let mut flips = 0;
        for i in 0..n {
            let (t, g) = (noisy.true_labels()[i], noisy.given_labels()[i]);
            if noisy.flip_mask()[i] {
                flips += 1;
                cells[t * k + g] += 1;
                self_flips += usize::from(t == g);
            }
        }
        // every true class spreads its flips evenly over the other k - 1 classes
        let mut stat = 0.0;
        for t in 0..k {
            let row = &cells[t * k..(t + 1) * k];
            let total: usize = row.iter().sum();
            let e = total as f64 / (k - 1) as f64;
            for (g, &c) in row.iter().enumerate() {
                if g != t {
                    stat += (c as f64 - e).powi(2) / e;
                }
            }
        }
        let dof = (k * (k - 2)) as f64;
        let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
        pass &= flips == expected && noisy.num_flipped() == expected && self_flips == 0 && p > 0.01;
        lines.push(format!("eps {rate}: {flips}/{expected} flips, {self_flips} self, chi2 p {p:.3}"));
    }
    report(4, "noise accounting", pass, lines.join("; "));
}

// ---------------------------------------------------------------- 5

#[test]
fn c5_memorization_fractions_sum_to_one() {
    use proptest::prelude::*;
    use proptest::test_runner::{Config, TestRunner};

    let strategy = (2usize..12, 1usize..150, any::<u64>());
    let mut runner = TestRunner::new(Config {
        cases: 1000,
        failure_persistence: None,
        ..Config::default()
    });
    let worst = std::cell::Cell::new(0.0f64);
    let outcome = runner.run(&strategy, |(k, n, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let mut given: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_bool(0.4) { (t + rng.random_range(1..k)) % k } else { t })
            .collect();
        given[0] = (truth[0] + 1) % k;
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let ds = LabeledDataset::from_parts(Tensor::zeros(&[n, 1, 1, 1]), given, truth, k, (0..n).collect()).unwrap();
        let rec = memorization_fractions(&preds, &ds).unwrap();
        let err = (rec.frac_correct + rec.frac_memorized + rec.frac_other - 1.0).abs();
        worst.set(worst.get().max(err));
        prop_assert!(err <= 1e-12, "sum off by {err}");
        Ok(())
    });
    report(
        5,
        "memorization identity",
        outcome.is_ok(),
        format!("1000 random cases, max |sum - 1| {:.1e} (<= 1e-12)", worst.get()),
    );
}

// ---------------------------------------------------------------- 6

#[test]
fn c6_early_learning_trend() {
    let dir = tempfile::tempdir().unwrap();
    let mut mem = [Vec::new(), Vec::new()];
    let mut top1 = [Vec::new(), Vec::new()];
    let mut slowest: f64 = 0.0;
    for seed in 0..3 {
        for (i, loss) in [LossSpec::Ce, LossSpec::Elr { lambda: 3.0, beta: 0.7 }].into_iter().enumerate() {
            let mut config = profiles::desk(loss, seed);
            config.output_dir = dir.path().join(format!("{i}-{seed}"));
            let start = Instant::now();
            let result = run_experiment(&config).unwrap();
            slowest = slowest.max(start.elapsed().as_secs_f64());
            let last = result.final_row();
            mem[i].push(last.mem_memorized.unwrap());
            top1[i].push(last.top1);
            println!(
                "     seed {seed} {:<3}: memorized {:.3}, test top1 {:.3}",
                ["ce", "elr"][i],
                last.mem_memorized.unwrap(),
                last.top1
            );
        }
    }
    let (ce_mem, elr_mem) = (median(mem[0].clone()), median(mem[1].clone()));
    let (ce_top1, elr_top1) = (median(top1[0].clone()), median(top1[1].clone()));
    report(
        6,
        "early-learning trend",
        ce_mem >= 0.5 && elr_mem <= ce_mem / 2.0 && elr_mem < ce_mem && elr_top1 - ce_top1 >= 0.05 && slowest < 300.0,
        format!(
            "median memorized ce {ce_mem:.3} (>= 0.5), elr {elr_mem:.3} (<= {:.3}); median top1 ce {ce_top1:.3}, elr {elr_top1:.3} (gap {:+.3} >= 0.05); slowest run {slowest:.1}s (< 300s)",
            ce_mem / 2.0,
            elr_top1 - ce_top1
        ),
    );
}

// ---------------------------------------------------------------- 7

fn tiny_model() -> (Model, Tensor, Vec<usize>) {
    let model = Model::build(&ModelConfig::mlp(&[6], 3, [1, 2, 2]), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = uniform(&mut rng, &[5, 1, 2, 2], 1.0);
    (model, x, vec![0, 1, 2, 1, 0])
}

fn ce_loss(m: &mut Model, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = m.bind(&mut tape, true);
    let input = tape.constant(x.clone());
    let logits = m.forward(&mut tape, &bound, input)?;
    let loss = cross_entropy(&mut tape, logits, labels)?;
    tape.backward(loss)?;
    m.accumulate_grads(&tape, &bound)?;
    tape.value(loss).item()
}

fn weights(m: &impl Parameterized) -> Vec<f64> {
    m.parameters().iter().flat_map(|p| p.value.data().to_vec()).collect()
}

#[test]
fn c7_sam_mechanics() {
    let (mut model, x, labels) = tiny_model();
    let rho = 0.05;
    let config = OptimizerConfig {
        momentum: 0.9,
        weight_decay: 1e-3,
        sam_rho: rho,
    };
    let mut state = OptimizerState::new(config, model.parameters());
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let before = weights(&model);
        let mut calls = 0;
        let out = sam_step(&mut model, &mut state, 0.1, |m| {
            calls += 1;
            if calls == 2 {
                let moved: f64 = weights(m).iter().zip(&before).map(|(a, b)| (a - b).powi(2)).sum();
                worst = worst.max((moved.sqrt() - rho).abs());
            }
            ce_loss(m, &x, &labels)
        })
        .unwrap();
        assert!(out.perturbed);
    }

    // ρ = 0 against hand-driven SGD
    let sgd_config = OptimizerConfig { sam_rho: 0.0, ..config };
    let (mut a, _, _) = tiny_model();
    let (mut b, _, _) = tiny_model();
    let mut sa = OptimizerState::new(sgd_config, a.parameters());
    let mut sb = OptimizerState::new(sgd_config, b.parameters());
    for _ in 0..10 {
        sam_step(&mut a, &mut sa, 0.1, |m| ce_loss(m, &x, &labels)).unwrap();
        b.zero_grad();
        ce_loss(&mut b, &x, &labels).unwrap();
        sgd_step(b.parameters_mut(), &mut sb, 0.1).unwrap();
    }
    let identical = weights(&a).iter().zip(weights(&b)).all(|(p, q)| p.to_bits() == q.to_bits());

    // all-zero gradient: no perturbation, no division by zero
    let mut flat = vec![Parameter::new("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap())];
    let mut st = OptimizerState::new(config, &flat);
    let mut calls = 0;
    let out = sam_step(&mut flat, &mut st, 0.1, |m| {
        calls += 1;
        m[0].grad = Some(Tensor::zeros(&[3]));
        Ok(1.0)
    })
    .unwrap();
    let fallback = !out.perturbed && calls == 1 && flat[0].value.is_finite();

    report(
        7,
        "SAM mechanics",
        worst <= 1e-10 && identical && fallback,
        format!("max |‖δ‖ - rho| {worst:.1e} (<= 1e-10), rho=0 bit-identical {identical}, zero-grad fallback {fallback}"),
    );
}

// ---------------------------------------------------------------- 8

#[test]
fn c8_determinism() {
    let mut desk = profiles::desk(LossSpec::Elr { lambda: 3.0, beta: 0.7 }, 1);
    desk.epochs = 10;
    let mut resnet = common::tiny_resnet(LossSpec::Elr { lambda: 3.0, beta: 0.7 }, 3, std::path::Path::new(""));
    resnet.optimizer.sam_rho = 0.05;
    resnet.augment = Some(Default::default());
    let configs = [common::tiny(LossSpec::Ce, 20, std::path::Path::new("")), desk, resnet];
    let mut same = 0;
    for (i, config) in configs.iter().enumerate() {
        let bytes: Vec<Vec<u8>> = (0..2)
            .map(|_| {
                let dir = tempfile::tempdir().unwrap();
                let mut c = config.clone();
                c.output_dir = dir.path().to_path_buf();
                run_experiment(&c).unwrap();
                std::fs::read(dir.path().join(METRICS_CSV)).unwrap()
            })
            .collect();
        if bytes[0] == bytes[1] && !bytes[0].is_empty() {
            same += 1;
        } else {
            println!("     config {i} differs");
        }
    }
    report(
        8,
        "determinism",
        same == configs.len(),
        format!("{same}/{} configs gave byte-identical metrics CSV on rerun", configs.len()),
    );
}

// ---------------------------------------------------------------- 9

/// Needs the CIFAR-10 binary batches; set `ELR_CIFAR10_DIR` and run with `--ignored`.
#[test]
#[ignore]
fn c9_cifar10_subset() {
    let Ok(dir) = std::env::var("ELR_CIFAR10_DIR") else {
        println!("SKIP 9 CIFAR-10 subset: ELR_CIFAR10_DIR not set");
        return;
    };
    let out = tempfile::tempdir().unwrap();
    let mut top1 = Vec::new();
    for (i, loss) in [LossSpec::Ce, LossSpec::Elr { lambda: 3.0, beta: 0.7 }].into_iter().enumerate() {
        let mut config = profiles::cifar10_default();
        config.dataset = elr_core::harness::DatasetSpec::Cifar10 {
            files: (1..=5).map(|b| format!("{dir}/data_batch_{b}.bin").into()).collect(),
            limit: Some(10_000),
        };
        config.model = elr_core::harness::ArchSpec::Resnet {
            block_counts: [1, 1, 1, 1],
            base_channels: 16,
        };
        config.loss = loss;
        config.epochs = 30;
        config.schedule = ScheduleConfig::Multistep {
            base_lr: 0.02,
            milestones: vec![15, 25],
            decay_factor: 10.0,
        };
        config.output_dir = out.path().join(i.to_string());
        top1.push(run_experiment(&config).unwrap().final_top1);
    }
    report(
        9,
        "CIFAR-10 subset",
        top1[1] - top1[0] >= 0.05,
        format!("top1 ce {:.3}, elr {:.3} (gap {:+.3} >= 0.05)", top1[0], top1[1], top1[1] - top1[0]),
    );
}
