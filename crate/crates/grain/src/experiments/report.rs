//! CSV exports for trials, traces, probes, and the aggregate table.
//! Floats are written with Rust's shortest round-trip formatting, so
//! re-aggregating a stored per-trial CSV reproduces the aggregate exactly.

use std::io::Write;
use std::path::Path;

use super::{Method, ProbeRow, TaskFamily, TrialResult};
use crate::error::{Error, Result};

/// Aggregate statistics for one (task, method) cell, Table-style.
#[derive(Debug, Clone, PartialEq)]
pub struct CellAggregate {
    pub task: TaskFamily,
    pub method: Method,
    pub trials: usize,
    /// Mean/std of per-trial prediction MAE (cm); absent for the baseline.
    pub mae_pred: Option<(f64, f64)>,
    /// Mean/std of per-trial final MAE (cm).
    pub mae_final: (f64, f64),
    pub success_rate: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reduce trial results (all sharing one task and method) to a cell.
pub fn aggregate_cell(results: &[&TrialResult]) -> Result<CellAggregate> {
    let first = results
        .first()
        .ok_or_else(|| Error::Config("cannot aggregate zero trials".into()))?;
    if results
        .iter()
        .any(|r| r.task != first.task || r.method != first.method)
    {
        return Err(Error::Config("mixed cells in aggregate".into()));
    }
    let finals: Vec<f64> = results.iter().map(|r| r.mae_final_cm).collect();
    let preds: Vec<f64> = results.iter().filter_map(|r| r.mae_pred_cm).collect();
    let successes = results.iter().filter(|r| r.success).count();
    Ok(CellAggregate {
        task: first.task,
        method: first.method,
        trials: results.len(),
        mae_pred: if preds.len() == results.len() {
            Some(mean_std(&preds))
        } else {
            None
        },
        mae_final: mean_std(&finals),
        success_rate: successes as f64 / results.len() as f64,
    })
}

/// Group mixed results by (task, method) in first-seen order and aggregate
/// each cell.
pub fn aggregate_all(results: &[TrialResult]) -> Result<Vec<CellAggregate>> {
    let mut order: Vec<(TaskFamily, Method)> = Vec::new();
    for r in results {
        if !order.contains(&(r.task, r.method)) {
            order.push((r.task, r.method));
        }
    }
    order
        .into_iter()
        .map(|(task, method)| {
            let cell: Vec<&TrialResult> = results
                .iter()
                .filter(|r| r.task == task && r.method == method)
                .collect();
            aggregate_cell(&cell)
        })
        .collect()
}

pub const TRIAL_CSV_HEADER: &str =
    "task,method,seed,excavations,termination,mae_pred_cm,mae_final_cm,success,final_distances_cm";

/// One row per trial. `final_distances_cm` is `;`-separated per obstacle.
pub fn write_trials_csv<P: AsRef<Path>>(path: P, results: &[TrialResult]) -> Result<()> {
    let mut out = String::new();
    out.push_str(TRIAL_CSV_HEADER);
    out.push('\n');
    for r in results {
        let pred = r
            .mae_pred_cm
            .map(|v| v.to_string())
            .unwrap_or_else(|| "N/A".into());
        let dists: Vec<String> = r.final_distances.iter().map(|d| d.to_string()).collect();
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.task.name(),
            r.method.name(),
            r.seed,
            r.excavations,
            r.termination,
            pred,
            r.mae_final_cm,
            r.success,
            dists.join(";")
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// The subset of trial fields needed to recompute aggregates from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub task: TaskFamily,
    pub method: Method,
    pub seed: u64,
    pub mae_pred_cm: Option<f64>,
    pub mae_final_cm: f64,
    pub success: bool,
    pub final_distances: Vec<f64>,
}

/// Parse a per-trial CSV written by `write_trials_csv`.
pub fn read_trials_csv<P: AsRef<Path>>(path: P) -> Result<Vec<TrialRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRIAL_CSV_HEADER => {}
        _ => return Err(Error::Format("unexpected trial CSV header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("trial CSV row {i}: expected 9 fields")));
        }
        let parse_f64 = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Format(format!("trial CSV row {i}: bad float {s}")))
        };
        rows.push(TrialRow {
            task: TaskFamily::parse(f[0])?,
            method: Method::parse(f[1])?,
            seed: f[2]
                .parse()
                .map_err(|_| Error::Format(format!("trial CSV row {i}: bad seed")))?,
            mae_pred_cm: if f[5] == "N/A" {
                None
            } else {
                Some(parse_f64(f[5])?)
            },
            mae_final_cm: parse_f64(f[6])?,
            success: f[7] == "true",
            final_distances: f[8]
                .split(';')
                .map(parse_f64)
                .collect::<Result<Vec<f64>>>()?,
        });
    }
    Ok(rows)
}

/// Aggregate parsed rows exactly as `aggregate_all` does live results.
pub fn aggregate_rows(rows: &[TrialRow]) -> Result<Vec<CellAggregate>> {
    let mut order: Vec<(TaskFamily, Method)> = Vec::new();
    for r in rows {
        if !order.contains(&(r.task, r.method)) {
            order.push((r.task, r.method));
        }
    }
    order
        .into_iter()
        .map(|(task, method)| {
            let cell: Vec<&TrialRow> = rows
                .iter()
                .filter(|r| r.task == task && r.method == method)
                .collect();
            if cell.is_empty() {
                return Err(Error::Config("empty cell".into()));
            }
            let finals: Vec<f64> = cell.iter().map(|r| r.mae_final_cm).collect();
            let preds: Vec<f64> = cell.iter().filter_map(|r| r.mae_pred_cm).collect();
            let successes = cell.iter().filter(|r| r.success).count();
            Ok(CellAggregate {
                task,
                method,
                trials: cell.len(),
                mae_pred: if preds.len() == cell.len() {
                    Some(mean_std(&preds))
                } else {
                    None
                },
                mae_final: mean_std(&finals),
                success_rate: successes as f64 / cell.len() as f64,
            })
        })
        .collect()
}

pub const AGGREGATE_CSV_HEADER: &str =
    "task,method,trials,mae_pred_mean_cm,mae_pred_std_cm,mae_final_mean_cm,mae_final_std_cm,success_rate";

pub fn write_aggregate_csv<P: AsRef<Path>>(path: P, cells: &[CellAggregate]) -> Result<()> {
    let mut out = String::new();
    out.push_str(AGGREGATE_CSV_HEADER);
    out.push('\n');
    for c in cells {
        let (pm, ps) = match c.mae_pred {
            Some((m, s)) => (m.to_string(), s.to_string()),
            None => ("N/A".into(), "N/A".into()),
        };
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            c.task.name(),
            c.method.name(),
            c.trials,
            pm,
            ps,
            c.mae_final.0,
            c.mae_final.1,
            c.success_rate
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Per-step trace for one trial: positions, predictions, and scores.
pub fn write_trace_csv<P: AsRef<Path>>(path: P, result: &TrialResult) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(
        f,
        "step,action_index,predicted_positions_cm,true_positions_cm,scores,best_score,termination"
    )?;
    let join_pos = |v: &[crate::geom::Vec2]| {
        v.iter()
            .map(|p| format!("{}|{}", p.x, p.y))
            .collect::<Vec<_>>()
            .join(";")
    };
    for s in &result.steps {
        let term = if s.step + 1 == result.excavations {
            result.termination
        } else {
            "continue"
        };
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            s.step,
            s.action_index,
            join_pos(&s.predictions),
            join_pos(&s.positions),
            s.scores
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            s.best_score.map(|v| v.to_string()).unwrap_or_default(),
            term
        )?;
    }
    Ok(())
}

pub fn write_probe_csv<P: AsRef<Path>>(path: P, rows: &[ProbeRow], mae: f64) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "action_index,pred_x_cm,pred_y_cm,true_x_cm,true_y_cm,error_cm")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.action_index, r.predicted.x, r.predicted.y, r.actual.x, r.actual.y, r.error_cm
        )?;
    }
    writeln!(f, "mae,,,,,{mae}")?;
    Ok(())
}
