//! Experiment configuration: a flat TOML document.
//!
//! ```toml
//! strategies = ["random", "paal_full"]
//! budgets = [0.2]
//! iterations = [5]
//! seeds = [0, 1, 2]
//! folds = 1
//! n = 2000
//! max_epochs = 200
//! ```

use std::path::{Path, PathBuf};

use paal_core::active::TrainConfig;
use paal_core::query::Strategy;
use serde::Deserialize;

use crate::error::{CliError, Result};

pub const DEFAULT_ITERATIONS: usize = 5;
pub const NUM_FOLDS: usize = 5;

const KEYS: &[&str] = &[
    "dataset",
    "n",
    "data_seed",
    "height",
    "width",
    "split_seed",
    "out",
    "strategies",
    "budgets",
    "iterations",
    "seeds",
    "folds",
    "max_epochs",
    "early_stop_tolerance",
    "silent_period",
    "iq_patience",
    "baseline_query_interval",
    "batch_size",
    "eval_batch_size",
    "lr",
    "lr_min",
    "warmup_epochs",
    "ap_lr_scale",
    "ap_warmup_epochs",
    "weight_decay",
    "init_ratio",
];

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Existing dataset file; relative paths resolve against the config file.
    pub dataset: Option<PathBuf>,
    /// Generation parameters, used when `dataset` is absent.
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default)]
    pub split_seed: u64,
    pub out: Option<PathBuf>,
    pub strategies: Vec<String>,
    #[serde(default = "default_budgets")]
    pub budgets: Vec<f64>,
    /// Maximum query iterations T, one per budget.
    #[serde(default)]
    pub iterations: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Number of folds to run, taken in order from the five-fold split.
    #[serde(default = "default_folds")]
    pub folds: usize,
    pub max_epochs: Option<usize>,
    pub early_stop_tolerance: Option<usize>,
    pub silent_period: Option<usize>,
    pub iq_patience: Option<usize>,
    pub baseline_query_interval: Option<usize>,
    pub batch_size: Option<usize>,
    pub eval_batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lr_min: Option<f64>,
    pub warmup_epochs: Option<usize>,
    pub ap_lr_scale: Option<f64>,
    pub ap_warmup_epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub init_ratio: Option<f64>,
}

fn default_n() -> usize {
    2000
}

fn default_side() -> usize {
    32
}

fn default_budgets() -> Vec<f64> {
    vec![0.2]
}

fn default_folds() -> usize {
    NUM_FOLDS
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| CliError::config(format!("{e}")))?;
        let unknown: Vec<&str> = table.keys().map(String::as_str).filter(|k| !KEYS.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(CliError::config(format!("unknown keys: {}", unknown.join(", "))));
        }
        let cfg: ExperimentConfig = table.try_into().map_err(|e| CliError::config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and resolves a relative `dataset` path against it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(ds), Some(dir)) = (&cfg.dataset, path.parent()) {
            if ds.is_relative() {
                cfg.dataset = Some(dir.join(ds));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(CliError::config("at least one strategy is required"));
        }
        self.parsed_strategies()?;
        if self.seeds.is_empty() {
            return Err(CliError::config("at least one seed is required"));
        }
        if self.budgets.is_empty() {
            return Err(CliError::config("at least one budget is required"));
        }
        if let Some(b) = self.budgets.iter().find(|b| !(**b > 0.0 && **b <= 1.0)) {
            return Err(CliError::config(format!("budget {b} outside (0, 1]")));
        }
        if !self.iterations.is_empty() && self.iterations.len() != self.budgets.len() {
            return Err(CliError::config(format!(
                "{} iteration counts for {} budgets",
                self.iterations.len(),
                self.budgets.len()
            )));
        }
        if self.iterations.contains(&0) {
            return Err(CliError::config("iterations must be at least 1"));
        }
        if !(1..=NUM_FOLDS).contains(&self.folds) {
            return Err(CliError::config(format!("folds must be in 1..={NUM_FOLDS}")));
        }
        self.train_config(0).validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn parsed_strategies(&self) -> Result<Vec<Strategy>> {
        self.strategies
            .iter()
            .map(|s| s.parse().map_err(|e: paal_core::Error| CliError::config(e.to_string())))
            .collect()
    }

    /// T for the budget at `index`.
    pub fn iterations_for(&self, index: usize) -> usize {
        self.iterations.get(index).copied().unwrap_or(DEFAULT_ITERATIONS)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            max_epochs: self.max_epochs.unwrap_or(d.max_epochs),
            early_stop_tolerance: self.early_stop_tolerance.unwrap_or(d.early_stop_tolerance),
            silent_period: self.silent_period.unwrap_or(d.silent_period),
            iq_patience: self.iq_patience.unwrap_or(d.iq_patience),
            baseline_query_interval: self.baseline_query_interval.unwrap_or(d.baseline_query_interval),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            eval_batch_size: self.eval_batch_size.unwrap_or(d.eval_batch_size),
            lr: self.lr.unwrap_or(d.lr),
            lr_min: self.lr_min.unwrap_or(d.lr_min),
            warmup_epochs: self.warmup_epochs.unwrap_or(d.warmup_epochs),
            ap_lr_scale: self.ap_lr_scale.unwrap_or(d.ap_lr_scale),
            ap_warmup_epochs: self.ap_warmup_epochs.unwrap_or(d.ap_warmup_epochs),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            init_ratio: self.init_ratio.unwrap_or(d.init_ratio),
            seed,
            ..d
        }
    }
}

/// Queried-sample budget for a pool of `train` samples: `floor(ratio * N)`,
/// capped by what is left after the initial labels.
pub fn budget_count(ratio: f64, train: usize, init_ratio: f64) -> usize {
    let m = ((init_ratio * train as f64) - 1e-9).ceil().max(1.0) as usize;
    let b = (ratio * train as f64 + 1e-9).floor() as usize;
    b.min(train.saturating_sub(m))
}
