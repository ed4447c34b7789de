//! Experiment campaigns for predictive-accuracy active learning: config
//! parsing, the cell runner and CSV reporting behind the `paal` binary.

pub mod config;
pub mod error;
pub mod report;
pub mod runner;

use std::path::{Path, PathBuf};

use paal_core::data::{generate, write_dataset, ClassProfile};

pub use config::ExperimentConfig;
pub use error::{CliError, Result};

pub const OUT_DIR_ENV: &str = "PAAL_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "paal_out";

/// Output root: explicit flag, then the config, then the environment.
pub fn resolve_out(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    flag.or(config)
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
}

/// Generates a dataset with the default profile and writes it to `out`.
/// Returns the per-class occurrence rates.
pub fn cmd_generate(n: usize, seed: u64, height: usize, width: usize, out: &Path) -> Result<Vec<f64>> {
    let profile = ClassProfile::default();
    let ds = generate(seed, n, height, width, &profile)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    }
    write_dataset(out, &ds)?;
    Ok(ds.occurrence(profile.n_fg()))
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<runner::RunSummary> {
    runner::run_campaign(cfg, out, jobs)
}

pub fn cmd_report(dir: &Path) -> Result<report::Campaign> {
    let campaign = report::Campaign::load(dir)?;
    report::write_report(dir, &campaign)?;
    Ok(campaign)
}
