//! Cross-product runs over strategies, budgets, and seeds, plus flattening of
//! run reports into plot-ready CSV.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::StrategyKind;
use crate::config::RunConfig;
use crate::error::{CbsError, Result};
use crate::features::FeatureStore;
use crate::protocol::{run, RunReport, SessionPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub strategies: Vec<StrategyKind>,
    pub budgets: Vec<usize>,
    pub seeds: Vec<u64>,
}

impl SweepSpec {
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &budget in &self.budgets {
                for &seed in &self.seeds {
                    out.push(CellKey {
                        strategy,
                        budget,
                        seed,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub strategy: StrategyKind,
    pub budget: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn file_name(&self) -> String {
        format!("{}_b{}_s{}.json", self.strategy, self.budget, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    #[serde(flatten)]
    pub key: CellKey,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub key: CellKey,
    pub outcome: std::result::Result<RunReport, String>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<Cell>,
}

impl SweepOutcome {
    pub fn failures(&self) -> Vec<CellFailure> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.outcome.as_ref().err().map(|e| CellFailure {
                    key: c.key,
                    error: e.clone(),
                })
            })
            .collect()
    }

    pub fn reports(&self) -> impl Iterator<Item = &RunReport> {
        self.cells.iter().filter_map(|c| c.outcome.as_ref().ok())
    }

    /// Wide table: one row per strategy, one column per budget, each cell the
    /// mean Avg over seeds that succeeded (empty when none did).
    pub fn aggregate_csv(&self, spec: &SweepSpec) -> Result<String> {
        let mut sums: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
        for cell in &self.cells {
            if let Ok(report) = &cell.outcome {
                let s = spec.strategies.iter().position(|&k| k == cell.key.strategy);
                let b = spec.budgets.iter().position(|&k| k == cell.key.budget);
                if let (Some(s), Some(b)) = (s, b) {
                    let e = sums.entry((s, b)).or_insert((0.0, 0));
                    e.0 += report.avg;
                    e.1 += 1;
                }
            }
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["strategy".to_string()];
        header.extend(spec.budgets.iter().map(|b| format!("B{b}")));
        w.write_record(&header).map_err(csv_err)?;
        for (s, strategy) in spec.strategies.iter().enumerate() {
            let mut row = vec![strategy.to_string()];
            for b in 0..spec.budgets.len() {
                row.push(match sums.get(&(s, b)) {
                    Some(&(sum, n)) => (sum / n as f64).to_string(),
                    None => String::new(),
                });
            }
            w.write_record(&row).map_err(csv_err)?;
        }
        finish(w)
    }

    /// Long table: one row per cell with its Avg or failure.
    pub fn cells_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["strategy", "budget", "seed", "avg", "status"])
            .map_err(csv_err)?;
        for cell in &self.cells {
            let (avg, status) = match &cell.outcome {
                Ok(r) => (r.avg.to_string(), "ok"),
                Err(_) => (String::new(), "failed"),
            };
            w.write_record([
                cell.key.strategy.to_string(),
                cell.key.budget.to_string(),
                cell.key.seed.to_string(),
                avg,
                status.to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; 0 lets the pool pick.
    pub workers: usize,
    /// When set, each finished cell's report is written here atomically.
    pub cell_dir: Option<PathBuf>,
}

/// Runs every (strategy, budget, seed) cell. The plan's budget and seed are
/// replaced per cell. A failing cell is recorded and the sweep continues.
/// Results come back in cross-product order regardless of worker count.
pub fn sweep(
    plan: &SessionPlan,
    store: &FeatureStore,
    spec: &SweepSpec,
    config: &RunConfig,
    options: &SweepOptions,
) -> Result<SweepOutcome> {
    config.validate()?;
    let store = if store.is_normalized() {
        store.clone()
    } else {
        store.l2_normalize()?
    };
    if let Some(dir) = &options.cell_dir {
        fs::create_dir_all(dir).map_err(|e| CbsError::io(dir, e))?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(options.workers)
        .build()
        .map_err(|e| CbsError::InvalidConfig(format!("worker pool: {e}")))?;
    let keys = spec.cells();
    let cells = pool.install(|| {
        keys.par_iter()
            .map(|&key| {
                let outcome = run_cell(plan, &store, key, config, options.cell_dir.as_deref())
                    .map_err(|e| e.to_string());
                Cell { key, outcome }
            })
            .collect()
    });
    Ok(SweepOutcome { cells })
}

fn run_cell(
    plan: &SessionPlan,
    store: &FeatureStore,
    key: CellKey,
    config: &RunConfig,
    dir: Option<&Path>,
) -> Result<RunReport> {
    let mut plan = plan.clone();
    plan.budget = key.budget;
    plan.seed = key.seed;
    let mut report = run(&plan, store, key.strategy, config)?;
    if let Some(dir) = dir {
        report.stamp_now();
        write_atomic(&dir.join(key.file_name()), report.to_json()?.as_bytes())?;
    }
    Ok(report)
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CbsError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CbsError::io(path, e))
}

/// Writes `aggregate.csv`, `cells.csv`, and `failures.json` into `dir`.
pub fn write_summary(outcome: &SweepOutcome, spec: &SweepSpec, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CbsError::io(dir, e))?;
    write_atomic(
        &dir.join("aggregate.csv"),
        outcome.aggregate_csv(spec)?.as_bytes(),
    )?;
    write_atomic(&dir.join("cells.csv"), outcome.cells_csv()?.as_bytes())?;
    let failures = serde_json::to_string_pretty(&outcome.failures())?;
    write_atomic(&dir.join("failures.json"), failures.as_bytes())
}

/// One row per session plus an `avg` summary row per report. An infinite
/// imbalance ratio becomes an empty cell with `undiscovered_class = true`.
pub fn reports_to_csv(reports: &[RunReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "strategy",
        "budget",
        "seed",
        "session",
        "accuracy",
        "old_class_accuracy",
        "new_class_accuracy",
        "num_selected",
        "imbalance_ratio",
        "undiscovered_class",
        "discovery_ratio",
        "median_class_kl",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in reports {
        let head = [
            r.strategy.to_string(),
            r.budget.to_string(),
            r.seed.to_string(),
        ];
        for s in &r.per_session {
            let mut kls: Vec<f64> = s.per_class_kl.values().copied().collect();
            let row = [
                s.session.to_string(),
                s.accuracy.to_string(),
                opt(s.old_class_accuracy),
                s.new_class_accuracy.to_string(),
                s.selected_ids.len().to_string(),
                opt(s.imbalance_ratio),
                s.undiscovered_class.to_string(),
                s.discovery_ratio.to_string(),
                opt(median(&mut kls)),
            ];
            w.write_record(head.iter().chain(&row)).map_err(csv_err)?;
        }
        let mut row: Vec<String> = head.to_vec();
        row.push("avg".into());
        row.push(r.avg.to_string());
        row.resize(12, String::new());
        w.write_record(&row).map_err(csv_err)?;
    }
    finish(w)
}

/// Median of the finite values; the mean of the middle two for even counts.
pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn csv_err(e: csv::Error) -> CbsError {
    CbsError::InvalidConfig(format!("csv output: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| CbsError::InvalidConfig(format!("csv output: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, WorldConfig};

    fn world() -> (FeatureStore, SessionPlan) {
        generate(&WorldConfig {
            num_sessions: 2,
            classes_per_session: 3,
            dim: 8,
            pool_per_class: 20,
            test_per_class: 5,
            separation: 6.0,
            imbalance_ratio: 1.0,
            seed: 1,
            budget: 12,
        })
        .unwrap()
    }

    #[test]
    fn single_cell_matches_simulate() {
        let (store, plan) = world();
        let spec = SweepSpec {
            strategies: vec![StrategyKind::Cbs],
            budgets: vec![12],
            seeds: vec![1],
        };
        let out = sweep(
            &plan,
            &store,
            &spec,
            &RunConfig::default(),
            &SweepOptions::default(),
        )
        .unwrap();
        let direct = run(&plan, &store, StrategyKind::Cbs, &RunConfig::default()).unwrap();
        assert_eq!(out.cells.len(), 1);
        assert_eq!(out.cells[0].outcome.as_ref().unwrap(), &direct);
    }

    #[test]
    fn failing_cells_do_not_stop_the_sweep() {
        let (store, plan) = world();
        let spec = SweepSpec {
            strategies: vec![StrategyKind::Random],
            budgets: vec![10, 10_000],
            seeds: vec![0, 1],
        };
        let out = sweep(
            &plan,
            &store,
            &spec,
            &RunConfig::default(),
            &SweepOptions::default(),
        )
        .unwrap();
        assert_eq!(out.cells.len(), 4);
        assert_eq!(out.reports().count(), 2);
        let failures = out.failures();
        assert_eq!(failures.len(), 2);
        assert!(failures.iter().all(|f| f.key.budget == 10_000));
        let agg = out.aggregate_csv(&spec).unwrap();
        let lines: Vec<&str> = agg.lines().collect();
        assert_eq!(lines[0], "strategy,B10,B10000");
        assert!(
            lines[1].starts_with("random,") && lines[1].ends_with(','),
            "{}",
            lines[1]
        );
    }

    #[test]
    fn budget_grid_gives_one_column_per_budget() {
        let spec = SweepSpec {
            strategies: vec![StrategyKind::Cbs, StrategyKind::Random],
            budgets: (40..=200).step_by(20).collect(),
            seeds: vec![],
        };
        let out = SweepOutcome { cells: Vec::new() };
        let agg = out.aggregate_csv(&spec).unwrap();
        assert_eq!(agg.lines().next().unwrap().split(',').count(), 1 + 9);
        assert_eq!(agg.lines().count(), 3);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let (store, plan) = world();
        let spec = SweepSpec {
            strategies: vec![StrategyKind::Cbs, StrategyKind::Coreset],
            budgets: vec![9, 12],
            seeds: vec![4, 5],
        };
        let cfg = RunConfig::default();
        let one = sweep(
            &plan,
            &store,
            &spec,
            &cfg,
            &SweepOptions {
                workers: 1,
                cell_dir: None,
            },
        )
        .unwrap();
        let four = sweep(
            &plan,
            &store,
            &spec,
            &cfg,
            &SweepOptions {
                workers: 4,
                cell_dir: None,
            },
        )
        .unwrap();
        let a: Vec<_> = one.reports().map(|r| r.canonical_json().unwrap()).collect();
        let b: Vec<_> = four
            .reports()
            .map(|r| r.canonical_json().unwrap())
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn csv_rows_and_sentinel() {
        let (store, plan) = world();
        let mut report = run(&plan, &store, StrategyKind::Random, &RunConfig::default()).unwrap();
        report.per_session[0].imbalance_ratio = None;
        report.per_session[0].undiscovered_class = true;
        let text = reports_to_csv(&[report]).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + 2 + 1);
        let cols: Vec<&str> = lines[1].split(',').collect();
        assert_eq!(cols[8], "");
        assert_eq!(cols[9], "true");
        assert!(lines[3].contains(",avg,"));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&mut []), None);
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), Some(2.5));
    }
}
