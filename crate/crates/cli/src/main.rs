use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use paal_experiment::{cmd_generate, cmd_report, cmd_run, resolve_out, CliError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "paal", version, about = "Predictive-accuracy active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic segmentation dataset.
    Generate {
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Output file [default: $PAAL_OUT_DIR/dataset.bin]
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (strategy, budget, seed, fold) cell of a config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Results directory [default: config `out`, then $PAAL_OUT_DIR]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Run this seed only, replacing the config's list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Aggregate a results directory into summary tables.
    Report {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate { n, seed, height, width, out } => {
            let out = out.unwrap_or_else(|| resolve_out(None, None).join("dataset.bin"));
            let rates = cmd_generate(n, seed, height, width, &out)?;
            let rates: Vec<String> = rates.iter().enumerate().map(|(c, r)| format!("c{}={r:.3}", c + 1)).collect();
            println!("wrote {} samples to {} (occurrence {})", n, out.display(), rates.join(" "));
        }
        Command::Run { config, out, jobs, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            let out = resolve_out(out.as_deref(), cfg.out.as_deref());
            let s = cmd_run(&cfg, &out, jobs)?;
            println!("{} cells computed, {} already done; results in {}", s.computed, s.skipped, out.display());
        }
        Command::Report { out } => {
            let out = resolve_out(out.as_deref(), None);
            let c = cmd_report(&out)?;
            println!("report over {} cells written to {}", c.cells.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.into()
        }
    }
}
