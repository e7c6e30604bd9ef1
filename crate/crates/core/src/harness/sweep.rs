use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::runner::{run_experiment, RunResult};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepMode {
    Grid,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    LogUniform { low: f64, high: f64 },
    Choice { values: Vec<toml::Value> },
}

impl Distribution {
    fn validate(&self, key: &str) -> Result<()> {
        let ok = match self {
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Distribution::LogUniform { low, high } => *low > 0.0 && high.is_finite() && low <= high,
            Distribution::Choice { values } => !values.is_empty(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid distribution for {key}")))
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> toml::Value {
        match self {
            Distribution::Uniform { low, high } => toml::Value::Float(low + (high - low) * rng.random::<f64>()),
            Distribution::LogUniform { low, high } => {
                let (a, b) = (low.ln(), high.ln());
                toml::Value::Float((a + (b - a) * rng.random::<f64>()).exp())
            }
            Distribution::Choice { values } => values[rng.random_range(0..values.len())].clone(),
        }
    }
}

fn default_refit_epochs() -> usize {
    150
}

/// A hyperparameter search around `base`. Keys of `grid` and `random` are
/// dotted paths into the experiment config, e.g. `loss.lambda`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub mode: SweepMode,
    pub max_runs: usize,
    pub sweep_epochs: usize,
    #[serde(default = "default_refit_epochs")]
    pub refit_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    pub base: ExperimentConfig,
    #[serde(default)]
    pub grid: BTreeMap<String, Vec<toml::Value>>,
    #[serde(default)]
    pub random: BTreeMap<String, Distribution>,
}

/// Sets `path` (dot separated) inside a TOML table, creating missing tables.
fn set_path(root: &mut toml::Value, path: &str, value: toml::Value) -> Result<()> {
    let mut node = root;
    let mut parts = path.split('.').peekable();
    while let Some(part) = parts.next() {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("sweep key {path}: {part} is inside a non-table value")))?;
        if parts.peek().is_none() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    Err(Error::config(format!("empty sweep key {path:?}")))
}

/// `base` with each override applied, re-validated as a whole.
pub fn apply_overrides(base: &ExperimentConfig, overrides: &BTreeMap<String, toml::Value>) -> Result<ExperimentConfig> {
    let mut tree = toml::Value::try_from(base).map_err(|e| Error::config(e.to_string()))?;
    for (path, value) in overrides {
        set_path(&mut tree, path, value.clone())?;
    }
    let config: ExperimentConfig = tree
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("{e} (overrides {overrides:?})")))?;
    config.validate()?;
    Ok(config)
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: SweepSpec = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        SweepSpec::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        if self.max_runs < 1 {
            return Err(Error::config("max_runs must be at least 1"));
        }
        match self.mode {
            SweepMode::Grid => {
                if !self.random.is_empty() {
                    return Err(Error::config("grid sweeps take no random distributions"));
                }
                if let Some((k, _)) = self.grid.iter().find(|(_, v)| v.is_empty()) {
                    return Err(Error::config(format!("grid list for {k} is empty")));
                }
            }
            SweepMode::Random => {
                if !self.grid.is_empty() {
                    return Err(Error::config("random sweeps take no grid lists"));
                }
                for (k, d) in &self.random {
                    d.validate(k)?;
                }
            }
        }
        Ok(())
    }

    /// Override sets in run order: the cartesian product over sorted keys
    /// (last key varies fastest) for grids, seeded draws for random mode.
    /// Capped at `max_runs`.
    pub fn overrides(&self) -> Vec<BTreeMap<String, toml::Value>> {
        match self.mode {
            SweepMode::Grid => {
                let mut out = vec![BTreeMap::new()];
                for (key, values) in &self.grid {
                    out = out
                        .into_iter()
                        .flat_map(|prefix| {
                            values.iter().map(move |v| {
                                let mut next = prefix.clone();
                                next.insert(key.clone(), v.clone());
                                next
                            })
                        })
                        .collect();
                }
                out.truncate(self.max_runs);
                out
            }
            SweepMode::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.max_runs)
                    .map(|_| {
                        self.random
                            .iter()
                            .map(|(k, d)| (k.clone(), d.sample(&mut rng)))
                            .collect()
                    })
                    .collect()
            }
        }
    }

    /// The trial configs: overrides applied, `sweep_epochs` epochs, each in
    /// its own `<index>-<hash>` directory under the base output directory.
    pub fn trials(&self) -> Result<Vec<(BTreeMap<String, toml::Value>, ExperimentConfig)>> {
        self.overrides()
            .into_iter()
            .enumerate()
            .map(|(i, ov)| {
                let mut config = apply_overrides(&self.base, &ov)?;
                config.epochs = self.sweep_epochs;
                config.output_dir = self.base.output_dir.clone();
                config.output_dir = self.base.output_dir.join(format!("{i:03}-{}", config.hash()));
                Ok((ov, config))
            })
            .collect()
    }
}

/// One trial of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub index: usize,
    pub overrides: BTreeMap<String, toml::Value>,
    pub config_hash: String,
    pub final_top1: Option<f64>,
    pub final_top5: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub trials: Vec<TrialOutcome>,
    pub results: Vec<Option<RunResult>>,
    /// Index of the best trial by final top-1, ties to the lowest index.
    pub best: usize,
    pub best_config: ExperimentConfig,
}

/// Highest final top-1 among successful trials; earliest index wins ties.
pub fn rank_best(trials: &[TrialOutcome]) -> Option<usize> {
    trials
        .iter()
        .filter_map(|t| t.final_top1.map(|a| (t.index, a)))
        .fold(None, |best: Option<(usize, f64)>, (i, a)| match best {
            Some((_, b)) if b >= a => best,
            _ => Some((i, a)),
        })
        .map(|(i, _)| i)
}

pub const SWEEP_JSON: &str = "sweep.json";

/// Runs every trial (concurrently), records failures, writes `sweep.json`
/// and returns the best trial.
pub fn run_sweep(spec: &SweepSpec) -> Result<SweepResult> {
    spec.validate()?;
    let trials = spec.trials()?;
    let results: Vec<Result<RunResult>> = trials.par_iter().map(|(_, c)| run_experiment(c)).collect();

    let mut outcomes = Vec::with_capacity(trials.len());
    let mut kept = Vec::with_capacity(trials.len());
    for (index, ((ov, config), result)) in trials.iter().zip(results).enumerate() {
        let (top1, top5, error, run) = match result {
            Ok(r) => (Some(r.final_top1), Some(r.final_top5), None, Some(r)),
            Err(e) => (None, None, Some(e.to_string()), None),
        };
        outcomes.push(TrialOutcome {
            index,
            overrides: ov.clone(),
            config_hash: config.hash(),
            final_top1: top1,
            final_top5: top5,
            error,
        });
        kept.push(run);
    }

    let root = &spec.base.output_dir;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let json = serde_json::to_string_pretty(&outcomes).expect("outcomes serialize");
    std::fs::write(root.join(SWEEP_JSON), json + "\n").map_err(|e| Error::io(root.join(SWEEP_JSON), e))?;

    let best = rank_best(&outcomes).ok_or_else(|| {
        let first = outcomes.iter().find_map(|t| t.error.clone()).unwrap_or_default();
        Error::Contract(format!("all {} sweep runs failed; first error: {first}", outcomes.len()))
    })?;
    Ok(SweepResult {
        best_config: trials[best].1.clone(),
        trials: outcomes,
        results: kept,
        best,
    })
}

/// Retrains the best trial's config for `refit_epochs` in `<root>/refit`.
pub fn refit_best(spec: &SweepSpec, sweep: &SweepResult) -> Result<RunResult> {
    let mut config = sweep.best_config.clone();
    config.epochs = spec.refit_epochs;
    config.output_dir = spec.base.output_dir.join("refit");
    run_experiment(&config)
}
