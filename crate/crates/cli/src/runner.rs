//! Campaign execution: one directory per cell, merged CSVs at the end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;

use paal_core::active::{run_active_learning, Plan, RunReport};
use paal_core::data::{generate, read_dataset, split_folds, ClassProfile, Dataset, Fold};
use paal_core::query::Strategy;

use crate::config::{budget_count, ExperimentConfig};
use crate::error::{CliError, Result};

pub const RESULTS_HEADER: &str = "run_id,strategy,budget,seed,fold,epoch,iteration,labeled_count,labeled_ratio,seg_loss,ap_loss,val_dsc_mean,val_dsc_c1,val_dsc_c2,val_dsc_c3";
pub const QUERIES_HEADER: &str = "run_id,iteration,sample_id,cluster,weight,query_time_ms";
pub const CALIBRATION_HEADER: &str = "run_id,sample_id,class,predicted_dsc,actual_dsc";
pub const ANNOTATIONS_HEADER: &str = "run_id,strategy,budget,seed,fold,iteration,class,count";

/// Files merged across cells, in the order they are written within a cell.
/// `results.csv` comes last and marks the cell as done.
pub const CELL_FILES: [(&str, &str); 4] = [
    ("queries.csv", QUERIES_HEADER),
    ("calibration.csv", CALIBRATION_HEADER),
    ("annotations.csv", ANNOTATIONS_HEADER),
    ("results.csv", RESULTS_HEADER),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub strategy: Strategy,
    pub budget: f64,
    pub iterations: usize,
    pub seed: u64,
    pub fold: usize,
}

impl Cell {
    pub fn run_id(&self) -> String {
        format!("{}_b{:.2}_s{}_f{}", self.strategy, self.budget, self.seed, self.fold)
    }
}

/// Every (strategy, budget, seed, fold) combination, in config order.
pub fn plan_cells(cfg: &ExperimentConfig) -> Result<Vec<Cell>> {
    let strategies = cfg.parsed_strategies()?;
    let mut cells = Vec::new();
    for &strategy in &strategies {
        for (bi, &budget) in cfg.budgets.iter().enumerate() {
            for &seed in &cfg.seeds {
                for fold in 0..cfg.folds {
                    cells.push(Cell {
                        strategy,
                        budget,
                        iterations: cfg.iterations_for(bi),
                        seed,
                        fold,
                    });
                }
            }
        }
    }
    Ok(cells)
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.dataset {
        Some(path) => Ok(read_dataset(path)?),
        None => Ok(generate(cfg.data_seed, cfg.n, cfg.height, cfg.width, &ClassProfile::default())?),
    }
}

pub fn cell_dir(out: &Path, cell: &Cell) -> PathBuf {
    out.join("cells").join(cell.run_id())
}

pub fn is_done(out: &Path, cell: &Cell) -> bool {
    cell_dir(out, cell).join("results.csv").is_file()
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub computed: usize,
    pub skipped: usize,
}

/// Runs every cell not already done, then rewrites the merged CSVs.
pub fn run_campaign(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<RunSummary> {
    let cells = plan_cells(cfg)?;
    fs::create_dir_all(out.join("cells")).map_err(|e| CliError::io(out.display(), e))?;
    let pending: Vec<Cell> = cells.iter().copied().filter(|c| !is_done(out, c)).collect();
    let summary = RunSummary {
        computed: pending.len(),
        skipped: cells.len() - pending.len(),
    };
    if !pending.is_empty() {
        let dataset = load_dataset(cfg)?;
        let split = split_folds(dataset.len(), cfg.split_seed)?;
        execute(cfg, out, &dataset, &split.folds, &pending, jobs.max(1))?;
    }
    merge(out, &cells)?;
    Ok(summary)
}

fn execute(cfg: &ExperimentConfig, out: &Path, dataset: &Dataset, folds: &[Fold], cells: &[Cell], jobs: usize) -> Result<()> {
    let next = AtomicUsize::new(0);
    let failed = AtomicBool::new(false);
    let first_error: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(cells.len()) {
            scope.spawn(|| loop {
                if failed.load(Ordering::SeqCst) {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { return };
                let started = std::time::Instant::now();
                match run_cell(cfg, out, dataset, &folds[cell.fold], cell) {
                    Ok(best) => eprintln!(
                        "[{}/{}] {} best {:.4} ({:.1}s)",
                        i + 1,
                        cells.len(),
                        cell.run_id(),
                        best,
                        started.elapsed().as_secs_f64()
                    ),
                    Err(e) => {
                        eprintln!("{}: {e}", cell.run_id());
                        failed.store(true, Ordering::SeqCst);
                        first_error.lock().expect("error slot").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    match first_error.into_inner().expect("error slot") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn run_cell(cfg: &ExperimentConfig, out: &Path, dataset: &Dataset, fold: &Fold, cell: &Cell) -> Result<f64> {
    let tc = cfg.train_config(cell.seed);
    let plan = Plan {
        budget: budget_count(cell.budget, fold.train.len(), tc.init_ratio),
        iterations: cell.iterations,
    };
    let report = run_active_learning(&tc, plan, cell.strategy, dataset, fold)?;
    if !report.best_val_dsc.is_finite() {
        return Err(CliError::Numeric(format!("{}: validation DSC is not finite", cell.run_id())));
    }
    write_cell(&cell_dir(out, cell), cell, &report)?;
    Ok(report.final_dsc())
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_file(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(tmp.display(), e))?;
    let mut text = String::with_capacity(64 * (rows.len() + 1));
    text.push_str(header);
    text.push('\n');
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(|e| CliError::io(tmp.display(), e))?;
    f.sync_all().map_err(|e| CliError::io(tmp.display(), e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path.display(), e))?;
    Ok(())
}

/// Writes one cell's CSVs; `results.csv` is renamed into place last.
pub fn write_cell(dir: &Path, cell: &Cell, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    let id = cell.run_id();
    let prefix = format!("{id},{},{},{},{}", cell.strategy, cell.budget, cell.seed, cell.fold);

    let mut queries = Vec::new();
    let mut annotations = Vec::new();
    for q in &report.queries {
        let s = &q.selection;
        for (k, sid) in s.ids.iter().enumerate() {
            queries.push(format!(
                "{id},{},{sid},{},{},{}",
                q.iteration,
                opt(s.clusters[k]),
                opt(s.weights[k]),
                q.wall_ms
            ));
        }
        for (c, n) in q.class_counts.iter().enumerate() {
            annotations.push(format!("{prefix},{},{},{n}", q.iteration, c + 1));
        }
    }
    let calibration: Vec<String> = report
        .calibration
        .iter()
        .map(|r| format!("{id},{},{},{},{}", r.sample_id, r.class, r.predicted, r.actual))
        .collect();
    let results: Vec<String> = report
        .epochs
        .iter()
        .map(|e| {
            let per_class: Vec<String> = e.val_dsc.iter().map(f64::to_string).collect();
            format!(
                "{prefix},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.iteration,
                e.labeled_count,
                e.labeled_count as f64 / report.train_size as f64,
                e.seg_loss,
                opt(e.ap_loss),
                e.val_dsc_mean,
                per_class.join(",")
            )
        })
        .collect();

    for ((name, header), rows) in CELL_FILES.iter().zip([&queries, &calibration, &annotations, &results]) {
        write_file(&dir.join(name), header, rows)?;
    }
    Ok(())
}

/// Concatenates finished cells' files in plan order under `out`.
pub fn merge(out: &Path, cells: &[Cell]) -> Result<()> {
    for (name, header) in CELL_FILES {
        let mut rows = Vec::new();
        for cell in cells.iter().filter(|c| is_done(out, c)) {
            let path = cell_dir(out, cell).join(name);
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(path.display(), e))?;
            rows.extend(text.lines().skip(1).map(str::to_owned));
        }
        write_file(&out.join(name), header, &rows)?;
    }
    Ok(())
}
