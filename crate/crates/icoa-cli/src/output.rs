//! CSV and JSON artifact writers. Every CSV has a fixed header and column
//! order; floats go through the shortest round-trip representation, so
//! re-running a deterministic experiment reproduces files byte for byte.
//! Diverged aggregate cells print the literal `NaN`.

use anyhow::{Context, Result};
use icoa::grid::{BoundRow, CellOutcome, Experiment, Method};
use icoa::trainer::{DeltaSetting, SweepRecord};
use serde::Serialize;
use std::path::Path;

/// Aggregate cells whose replications mostly diverged are reported as NaN.
const DIVERGED_CELL_THRESHOLD: f64 = 0.5;

#[derive(Serialize)]
struct TraceRow {
    sweep: usize,
    eta: f64,
    train_mse: f64,
    test_mse: f64,
    scalars_transmitted: u64,
}

pub fn write_trace(path: &Path, trace: &[SweepRecord]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in trace {
        w.serialize(TraceRow {
            sweep: r.sweep,
            eta: r.eta,
            train_mse: r.train_mse,
            test_mse: r.test_mse,
            scalars_transmitted: r.scalars_transmitted,
        })?;
    }
    w.flush()?;
    Ok(())
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Icoa => "icoa",
        Method::Refit => "refit",
        Method::Averaging => "averaging",
    }
}

fn delta_value(d: DeltaSetting) -> serde_json::Value {
    match d {
        DeltaSetting::Fixed(v) => serde_json::json!(v),
        DeltaSetting::Auto => serde_json::json!("auto"),
    }
}

#[derive(Serialize)]
struct FinalRow {
    sweep: usize,
    eta: f64,
    train_mse: f64,
    test_mse: f64,
    scalars_transmitted: u64,
}

#[derive(Serialize)]
struct RepSummary {
    replication: usize,
    data_seed: u64,
    trainer_seed: u64,
    converged: bool,
    diverged: bool,
    delta_used: f64,
    sweeps: usize,
    #[serde(rename = "final")]
    final_row: FinalRow,
    best_test_mse: f64,
    weights: Vec<f64>,
}

fn rep_summary(rep: &icoa::grid::RepOutcome) -> RepSummary {
    let r = &rep.result;
    let last = r.trace.last().expect("nonempty trace");
    RepSummary {
        replication: rep.replication,
        data_seed: rep.data_seed,
        trainer_seed: rep.trainer_seed,
        converged: r.converged,
        diverged: r.diverged,
        delta_used: r.delta_used,
        sweeps: r.trace.len() - 1,
        final_row: FinalRow {
            sweep: last.sweep,
            eta: last.eta,
            train_mse: last.train_mse,
            test_mse: last.test_mse,
            scalars_transmitted: last.scalars_transmitted,
        },
        best_test_mse: r.min_test_mse(),
        weights: last.weights.clone(),
    }
}

fn total_scalars(reps: &[icoa::grid::RepOutcome]) -> u64 {
    reps.iter().map(|r| r.result.scalars_transmitted).sum()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_run_summary(path: &Path, exp: &Experiment, cell: &CellOutcome) -> Result<()> {
    #[derive(Serialize)]
    struct RunSummary {
        method: &'static str,
        replications: usize,
        root_seed: u64,
        alpha: f64,
        delta: serde_json::Value,
        minimax_enabled: bool,
        test_mse: Option<f64>,
        scalars_transmitted: u64,
        diverged_fraction: f64,
        reps: Vec<RepSummary>,
    }
    write_json(
        path,
        &RunSummary {
            method: method_name(exp.method),
            replications: exp.replications,
            root_seed: exp.seed,
            alpha: cell.alpha,
            delta: delta_value(cell.delta),
            minimax_enabled: exp.trainer.minimax_enabled,
            test_mse: cell.mean_final_test_mse(),
            scalars_transmitted: total_scalars(&cell.reps),
            diverged_fraction: cell.diverged_fraction(),
            reps: cell.reps.iter().map(rep_summary).collect(),
        },
    )
}

/// The Table-3-shaped matrix: δ rows by α columns, mean final test MSE per
/// cell, `NaN` when at least half the replications diverged.
pub fn write_matrix(
    path: &Path,
    cells: &[CellOutcome],
    alphas: &[f64],
    deltas: &[f64],
) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["delta".to_string()];
    header.extend(alphas.iter().map(|a| format!("alpha_{a}")));
    w.write_record(&header)?;
    for (j, d) in deltas.iter().enumerate() {
        let mut row = vec![format!("{d}")];
        for (i, _) in alphas.iter().enumerate() {
            let cell = &cells[i * deltas.len() + j];
            row.push(cell_text(cell));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn cell_text(cell: &CellOutcome) -> String {
    if cell.diverged_fraction() >= DIVERGED_CELL_THRESHOLD {
        return "NaN".to_string();
    }
    match cell.mean_final_test_mse() {
        Some(m) => format!("{m}"),
        None => "NaN".to_string(),
    }
}

/// Long-form grid results, one row per (α, δ) cell.
pub fn write_cells(path: &Path, cells: &[CellOutcome]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["alpha", "delta", "mean_test_mse", "diverged_fraction"])?;
    for cell in cells {
        let delta = match cell.delta {
            DeltaSetting::Fixed(v) => format!("{v}"),
            DeltaSetting::Auto => "auto".to_string(),
        };
        w.write_record(&[
            format!("{}", cell.alpha),
            delta,
            cell_text(cell),
            format!("{}", cell.diverged_fraction()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_summary(path: &Path, exp: &Experiment, cells: &[CellOutcome]) -> Result<()> {
    #[derive(Serialize)]
    struct CellSummary {
        alpha: f64,
        delta: serde_json::Value,
        mean_test_mse: Option<f64>,
        diverged_fraction: f64,
        scalars_transmitted: u64,
        reps: Vec<RepSummary>,
    }
    #[derive(Serialize)]
    struct SweepSummary {
        method: &'static str,
        replications: usize,
        root_seed: u64,
        cells: Vec<CellSummary>,
    }
    write_json(
        path,
        &SweepSummary {
            method: method_name(exp.method),
            replications: exp.replications,
            root_seed: exp.seed,
            cells: cells
                .iter()
                .map(|c| CellSummary {
                    alpha: c.alpha,
                    delta: delta_value(c.delta),
                    mean_test_mse: if c.diverged_fraction() >= DIVERGED_CELL_THRESHOLD {
                        None
                    } else {
                        c.mean_final_test_mse()
                    },
                    diverged_fraction: c.diverged_fraction(),
                    scalars_transmitted: total_scalars(&c.reps),
                    reps: c.reps.iter().map(rep_summary).collect(),
                })
                .collect(),
        },
    )
}

/// The bound-vs-actual curve: one row per α at δ = δ_opt(α).
pub fn write_bound(path: &Path, rows: &[BoundRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["alpha", "delta", "bound", "actual"])?;
    for row in rows {
        let actual = match row.mean_actual() {
            Some(v) => format!("{v}"),
            None => "NaN".to_string(),
        };
        w.write_record(&[
            format!("{}", row.alpha),
            format!("{}", row.mean_delta()),
            format!("{}", row.mean_bound()),
            actual,
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bound_summary(path: &Path, exp: &Experiment, rows: &[BoundRow]) -> Result<()> {
    #[derive(Serialize)]
    struct BoundRepSummary {
        replication: usize,
        delta: f64,
        bound: f64,
        test_mse: f64,
        converged: bool,
        diverged: bool,
    }
    #[derive(Serialize)]
    struct BoundRowSummary {
        alpha: f64,
        delta: f64,
        bound: f64,
        actual: Option<f64>,
        reps: Vec<BoundRepSummary>,
    }
    #[derive(Serialize)]
    struct BoundSummary {
        method: &'static str,
        replications: usize,
        root_seed: u64,
        rows: Vec<BoundRowSummary>,
    }
    write_json(
        path,
        &BoundSummary {
            method: method_name(exp.method),
            replications: exp.replications,
            root_seed: exp.seed,
            rows: rows
                .iter()
                .map(|r| BoundRowSummary {
                    alpha: r.alpha,
                    delta: r.mean_delta(),
                    bound: r.mean_bound(),
                    actual: r.mean_actual(),
                    reps: r
                        .reps
                        .iter()
                        .map(|b| BoundRepSummary {
                            replication: b.replication,
                            delta: b.delta,
                            bound: b.bound,
                            test_mse: b.test_mse,
                            converged: b.converged,
                            diverged: b.diverged,
                        })
                        .collect(),
                })
                .collect(),
        },
    )
}
