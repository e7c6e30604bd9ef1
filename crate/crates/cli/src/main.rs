use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use elr_core::harness::{
    evaluate, load_checkpoint, refit_best, run_experiment, run_sweep, ExperimentConfig, Preprocess, SweepSpec,
};
use elr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "elr", about = "Noisy-label training with early-learning regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the run seed (model init, shuffling, augmentation).
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a grid or random hyperparameter sweep.
    Sweep {
        #[arg(long)]
        spec: PathBuf,
        /// Retrain the best config for the sweep file's refit_epochs.
        #[arg(long)]
        refit: bool,
    },
    /// Recompute metrics and memorization from a checkpoint.
    Diagnose {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Experiment config describing the data the checkpoint was trained on.
        #[arg(long)]
        dataset: PathBuf,
    },
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json value serializes"));
}

fn train(config: PathBuf, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut config = ExperimentConfig::from_file(&config)?;
    if let Some(s) = seed {
        config.run_seed = s;
    }
    if let Some(dir) = out {
        config.output_dir = dir;
    }
    let result = run_experiment(&config)?;
    let last = result.final_row();
    print_json(&serde_json::json!({
        "output_dir": config.output_dir,
        "config_hash": result.config_hash,
        "epochs": config.epochs,
        "final_top1": result.final_top1,
        "final_top5": result.final_top5,
        "final_mem_memorized": last.mem_memorized,
    }));
    Ok(())
}

fn sweep(spec: PathBuf, refit: bool) -> Result<()> {
    let spec = SweepSpec::from_file(&spec)?;
    let result = run_sweep(&spec)?;
    for t in &result.trials {
        match (&t.error, t.final_top1) {
            (Some(e), _) => eprintln!("run {:03} failed: {e}", t.index),
            (None, Some(a)) => eprintln!("run {:03} top1 {a:.4} {:?}", t.index, t.overrides),
            _ => {}
        }
    }
    let mut report = serde_json::json!({
        "best_index": result.best,
        "best": result.trials[result.best],
    });
    if refit {
        let r = refit_best(&spec, &result)?;
        report["refit"] = serde_json::json!({
            "output_dir": r.config.output_dir,
            "epochs": r.config.epochs,
            "final_top1": r.final_top1,
            "final_top5": r.final_top5,
        });
    }
    print_json(&report);
    Ok(())
}

fn diagnose(checkpoint: PathBuf, dataset: PathBuf) -> Result<()> {
    let config = ExperimentConfig::from_file(&dataset)?;
    let mut ckpt = load_checkpoint(&checkpoint)?;
    if ckpt.model.config() != &config.model_config() {
        return Err(Error::Config(
            "checkpoint model does not match the dataset's class count or image shape".into(),
        ));
    }
    let (train, test) = config.prepare_data()?;
    let pre = Preprocess::new(&config, &train)?;
    let ev = evaluate(
        &mut ckpt.model,
        &config.loss,
        ckpt.targets.as_ref(),
        &train,
        &pre.eval(train.images())?,
        &test,
        &pre.eval(test.images())?,
    )?;
    print_json(&serde_json::json!({ "epoch": ckpt.epoch, "evaluation": ev }));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train { config, seed, out } => train(config, seed, out),
        Command::Sweep { spec, refit } => sweep(spec, refit),
        Command::Diagnose { checkpoint, dataset } => diagnose(checkpoint, dataset),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
