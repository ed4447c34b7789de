//! Aggregation of a results directory into summary tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{CliError, Result};

pub const SUMMARY_HEADER: &str = "strategy,budget,dsc_mean,dsc_std,query_time_mean";
pub const DISTRIBUTION_HEADER: &str = "strategy,class,annotated_count,ratio_vs_random";
pub const CURVES_HEADER: &str = "strategy,labeled_ratio,dsc_mean";
pub const CALIBRATION_SUMMARY_HEADER: &str = "strategy,budget,class,n,pearson_r";

/// Final outcome of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub run_id: String,
    pub strategy: String,
    pub budget: f64,
    pub seed: u64,
    pub fold: usize,
    /// Best validation mean DSC over the run.
    pub final_dsc: f64,
    pub final_labeled_ratio: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Campaign {
    /// In order of first appearance in results.csv.
    pub cells: Vec<CellResult>,
    /// Wall time of each query, keyed by (run_id, iteration).
    pub query_ms: BTreeMap<(String, usize), f64>,
    /// Annotated image counts keyed by (run_id, class).
    pub annotations: BTreeMap<(String, usize), u64>,
    /// (predicted, actual) per class, keyed by (run_id, sample_id).
    pub calibration: BTreeMap<(String, u32), Vec<(f64, f64)>>,
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    csv::Reader::from_path(path).map_err(|e| CliError::io(path.display(), e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, headers: &csv::StringRecord, name: &str) -> Result<T> {
    let idx = headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| CliError::Io(format!("missing column {name}")))?;
    rec.get(idx)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Io(format!("bad value in column {name}: {:?}", rec.get(idx))))
}

impl Campaign {
    /// Reads the merged CSVs of a results directory. Only `results.csv` is
    /// required.
    pub fn load(dir: &Path) -> Result<Self> {
        let results = dir.join("results.csv");
        if !results.is_file() {
            return Err(CliError::Io(format!("{} not found", results.display())));
        }
        let mut campaign = Campaign::default();
        let mut rdr = reader(&results)?;
        let h = rdr.headers()?.clone();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let run_id: String = field(&rec, &h, "run_id")?;
            let dsc: f64 = field(&rec, &h, "val_dsc_mean")?;
            let ratio: f64 = field(&rec, &h, "labeled_ratio")?;
            match index.get(&run_id) {
                Some(&i) => {
                    let c = &mut campaign.cells[i];
                    c.final_dsc = c.final_dsc.max(dsc);
                    c.final_labeled_ratio = ratio;
                }
                None => {
                    index.insert(run_id.clone(), campaign.cells.len());
                    campaign.cells.push(CellResult {
                        strategy: field(&rec, &h, "strategy")?,
                        budget: field(&rec, &h, "budget")?,
                        seed: field(&rec, &h, "seed")?,
                        fold: field(&rec, &h, "fold")?,
                        final_dsc: dsc,
                        final_labeled_ratio: ratio,
                        run_id,
                    });
                }
            }
        }

        let queries = dir.join("queries.csv");
        if queries.is_file() {
            let mut rdr = reader(&queries)?;
            let h = rdr.headers()?.clone();
            for rec in rdr.records() {
                let rec = rec?;
                campaign.query_ms.insert(
                    (field(&rec, &h, "run_id")?, field(&rec, &h, "iteration")?),
                    field(&rec, &h, "query_time_ms")?,
                );
            }
        }
        let annotations = dir.join("annotations.csv");
        if annotations.is_file() {
            let mut rdr = reader(&annotations)?;
            let h = rdr.headers()?.clone();
            for rec in rdr.records() {
                let rec = rec?;
                *campaign
                    .annotations
                    .entry((field(&rec, &h, "run_id")?, field(&rec, &h, "class")?))
                    .or_default() += field::<u64>(&rec, &h, "count")?;
            }
        }
        let calibration = dir.join("calibration.csv");
        if calibration.is_file() {
            let mut rdr = reader(&calibration)?;
            let h = rdr.headers()?.clone();
            for rec in rdr.records() {
                let rec = rec?;
                campaign
                    .calibration
                    .entry((field(&rec, &h, "run_id")?, field(&rec, &h, "sample_id")?))
                    .or_default()
                    .push((field(&rec, &h, "predicted_dsc")?, field(&rec, &h, "actual_dsc")?));
            }
        }
        Ok(campaign)
    }

    /// Keeps only the cells accepted by `keep`, with their side tables.
    pub fn filter(&self, keep: impl Fn(&CellResult) -> bool) -> Campaign {
        let cells: Vec<CellResult> = self.cells.iter().filter(|c| keep(c)).cloned().collect();
        let ids: std::collections::BTreeSet<&str> = cells.iter().map(|c| c.run_id.as_str()).collect();
        Campaign {
            query_ms: self.query_ms.iter().filter(|((r, _), _)| ids.contains(r.as_str())).map(|(k, v)| (k.clone(), *v)).collect(),
            annotations: self.annotations.iter().filter(|((r, _), _)| ids.contains(r.as_str())).map(|(k, v)| (k.clone(), *v)).collect(),
            calibration: self.calibration.iter().filter(|((r, _), _)| ids.contains(r.as_str())).map(|(k, v)| (k.clone(), v.clone())).collect(),
            cells,
        }
    }

    fn strategies(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.strategy.as_str()) {
                out.push(&c.strategy);
            }
        }
        out
    }

    fn budgets(&self, strategy: &str) -> Vec<f64> {
        let mut out: Vec<f64> = self.cells.iter().filter(|c| c.strategy == strategy).map(|c| c.budget).collect();
        out.sort_by(f64::total_cmp);
        out.dedup();
        out
    }

    fn group(&self, strategy: &str, budget: f64) -> impl Iterator<Item = &CellResult> {
        let strategy = strategy.to_owned();
        self.cells.iter().filter(move |c| c.strategy == strategy && c.budget == budget)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Pearson correlation; `None` when either side is constant or fewer than
/// two pairs are given.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let (mx, _) = mean_std(xs);
    let (my, _) = mean_std(ys);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub strategy: String,
    pub budget: f64,
    pub dsc_mean: f64,
    pub dsc_std: f64,
    /// Seconds per query; `None` when no query ran.
    pub query_time_mean: Option<f64>,
}

pub fn summary(c: &Campaign) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for s in c.strategies() {
        for b in c.budgets(s) {
            let cells: Vec<&CellResult> = c.group(s, b).collect();
            let dsc: Vec<f64> = cells.iter().map(|x| x.final_dsc).collect();
            let (dsc_mean, dsc_std) = mean_std(&dsc);
            let times: Vec<f64> = cells
                .iter()
                .flat_map(|x| c.query_ms.range((x.run_id.clone(), 0)..=(x.run_id.clone(), usize::MAX)))
                .map(|(_, ms)| ms / 1000.0)
                .collect();
            rows.push(SummaryRow {
                strategy: s.to_owned(),
                budget: b,
                dsc_mean,
                dsc_std,
                query_time_mean: (!times.is_empty()).then(|| mean_std(&times).0),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistributionRow {
    pub strategy: String,
    pub class: usize,
    /// Queried images containing the class, summed over cells.
    pub annotated_count: u64,
    pub ratio_vs_random: Option<f64>,
}

pub fn distribution(c: &Campaign) -> Vec<DistributionRow> {
    let mut totals: BTreeMap<(&str, usize), u64> = BTreeMap::new();
    let strategy_of: BTreeMap<&str, &str> = c.cells.iter().map(|x| (x.run_id.as_str(), x.strategy.as_str())).collect();
    let mut classes: Vec<usize> = Vec::new();
    for ((run, class), n) in &c.annotations {
        if let Some(s) = strategy_of.get(run.as_str()) {
            *totals.entry((s, *class)).or_default() += n;
            if !classes.contains(class) {
                classes.push(*class);
            }
        }
    }
    classes.sort_unstable();
    let mut rows = Vec::new();
    for s in c.strategies() {
        for &class in &classes {
            let n = totals.get(&(s, class)).copied().unwrap_or(0);
            let random = totals.get(&("random", class)).copied();
            rows.push(DistributionRow {
                strategy: s.to_owned(),
                class,
                annotated_count: n,
                ratio_vs_random: random.filter(|&r| r > 0).map(|r| n as f64 / r as f64),
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub strategy: String,
    pub labeled_ratio: f64,
    pub dsc_mean: f64,
}

/// One point per (strategy, budget): mean final labeled ratio against mean
/// final DSC.
pub fn curves(c: &Campaign) -> Vec<CurveRow> {
    let mut rows = Vec::new();
    for s in c.strategies() {
        for b in c.budgets(s) {
            let cells: Vec<&CellResult> = c.group(s, b).collect();
            let ratio: Vec<f64> = cells.iter().map(|x| x.final_labeled_ratio).collect();
            let dsc: Vec<f64> = cells.iter().map(|x| x.final_dsc).collect();
            rows.push(CurveRow {
                strategy: s.to_owned(),
                labeled_ratio: mean_std(&ratio).0,
                dsc_mean: mean_std(&dsc).0,
            });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSummaryRow {
    pub strategy: String,
    pub budget: f64,
    /// `None` for the per-sample mean over classes.
    pub class: Option<usize>,
    pub n: usize,
    pub pearson_r: Option<f64>,
}

/// Predicted against actual DSC on the final pool: per sample (class mean)
/// and per class, pooled over the cells of each (strategy, budget).
pub fn calibration_summary(c: &Campaign) -> Vec<CalibrationSummaryRow> {
    let mut rows = Vec::new();
    for s in c.strategies() {
        for b in c.budgets(s) {
            let pairs: Vec<&Vec<(f64, f64)>> = c
                .group(s, b)
                .flat_map(|x| {
                    c.calibration
                        .range((x.run_id.clone(), 0)..=(x.run_id.clone(), u32::MAX))
                        .map(|(_, v)| v)
                })
                .collect();
            if pairs.is_empty() {
                continue;
            }
            let n_classes = pairs.iter().map(|v| v.len()).max().unwrap_or(0);
            let mut push = |class: Option<usize>, xs: Vec<f64>, ys: Vec<f64>| {
                rows.push(CalibrationSummaryRow {
                    strategy: s.to_owned(),
                    budget: b,
                    class,
                    n: xs.len(),
                    pearson_r: pearson(&xs, &ys),
                })
            };
            let means = |pick: fn(&(f64, f64)) -> f64| -> Vec<f64> {
                pairs.iter().map(|v| v.iter().map(pick).sum::<f64>() / v.len() as f64).collect()
            };
            push(None, means(|p| p.0), means(|p| p.1));
            for k in 0..n_classes {
                let sel: Vec<&(f64, f64)> = pairs.iter().filter_map(|v| v.get(k)).collect();
                push(Some(k + 1), sel.iter().map(|p| p.0).collect(), sel.iter().map(|p| p.1).collect());
            }
        }
    }
    rows
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_csv(path: &Path, header: &str, rows: impl Iterator<Item = String>) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| CliError::io(path.display(), e))
}

/// Writes the four report tables next to the campaign's CSVs.
pub fn write_report(dir: &Path, c: &Campaign) -> Result<()> {
    write_csv(
        &dir.join("summary.csv"),
        SUMMARY_HEADER,
        summary(c).into_iter().map(|r| {
            format!("{},{},{},{},{}", r.strategy, r.budget, r.dsc_mean, r.dsc_std, fmt_opt(r.query_time_mean))
        }),
    )?;
    write_csv(
        &dir.join("distribution.csv"),
        DISTRIBUTION_HEADER,
        distribution(c)
            .into_iter()
            .map(|r| format!("{},{},{},{}", r.strategy, r.class, r.annotated_count, fmt_opt(r.ratio_vs_random))),
    )?;
    write_csv(
        &dir.join("curves.csv"),
        CURVES_HEADER,
        curves(c).into_iter().map(|r| format!("{},{},{}", r.strategy, r.labeled_ratio, r.dsc_mean)),
    )?;
    write_csv(
        &dir.join("calibration_summary.csv"),
        CALIBRATION_SUMMARY_HEADER,
        calibration_summary(c).into_iter().map(|r| {
            let class = r.class.map_or_else(|| "mean".to_owned(), |k| k.to_string());
            format!("{},{},{class},{},{}", r.strategy, r.budget, r.n, fmt_opt(r.pearson_r))
        }),
    )?;
    Ok(())
}
