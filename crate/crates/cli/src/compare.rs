//! Across-seed summaries of two result groups.

use std::fmt;
use std::path::Path;

use serde::Serialize;

use crate::output::read_results;
use crate::runner::ResultRow;
use crate::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStats {
    pub name: String,
    pub runs: usize,
    pub nat_mean: f64,
    pub nat_std: f64,
    pub rob_mean: f64,
    pub rob_std: f64,
    pub rob_min: f64,
    pub overfit_events: usize,
    pub diverged: usize,
    pub grad_passes_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub baseline: GroupStats,
    pub candidate: GroupStats,
    /// candidate minus baseline
    pub nat_delta: f64,
    pub rob_delta: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Rows whose label equals `name`; failing that, rows whose strategy does.
pub fn select<'a>(rows: &'a [ResultRow], name: &str) -> Vec<&'a ResultRow> {
    let by_label: Vec<_> = rows.iter().filter(|r| r.label == name).collect();
    if !by_label.is_empty() {
        return by_label;
    }
    rows.iter().filter(|r| r.strategy == name).collect()
}

pub fn group_stats(rows: &[ResultRow], name: &str) -> Result<GroupStats> {
    let g = select(rows, name);
    if g.is_empty() {
        return Err(CliError::MissingGroup(name.to_string()));
    }
    let nat: Vec<f64> = g.iter().map(|r| r.nat_acc).collect();
    let rob: Vec<f64> = g.iter().map(|r| r.rob_acc).collect();
    let (nat_mean, nat_std) = mean_std(&nat);
    let (rob_mean, rob_std) = mean_std(&rob);
    Ok(GroupStats {
        name: name.to_string(),
        runs: g.len(),
        nat_mean,
        nat_std,
        rob_mean,
        rob_std,
        rob_min: rob.iter().cloned().fold(f64::INFINITY, f64::min),
        overfit_events: g.iter().map(|r| r.overfit_events).sum(),
        diverged: g.iter().filter(|r| r.diverged).count(),
        grad_passes_mean: g.iter().map(|r| r.grad_pass_count as f64).sum::<f64>() / g.len() as f64,
    })
}

pub fn compare_rows(rows: &[ResultRow], baseline: &str, candidate: &str) -> Result<Comparison> {
    let a = group_stats(rows, baseline)?;
    let b = group_stats(rows, candidate)?;
    Ok(Comparison {
        nat_delta: b.nat_mean - a.nat_mean,
        rob_delta: b.rob_mean - a.rob_mean,
        baseline: a,
        candidate: b,
    })
}

pub fn compare(results: &Path, baseline: &str, candidate: &str) -> Result<Comparison> {
    compare_rows(&read_results(results)?, baseline, candidate)
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<24} {:>4} {:>16} {:>16} {:>8} {:>8} {:>10}",
            "group", "runs", "nat (mean±std)", "rob (mean±std)", "overfit", "diverged", "passes"
        )?;
        for g in [&self.baseline, &self.candidate] {
            writeln!(
                f,
                "{:<24} {:>4} {:>8.4}±{:<7.4} {:>8.4}±{:<7.4} {:>8} {:>8} {:>10.0}",
                g.name, g.runs, g.nat_mean, g.nat_std, g.rob_mean, g.rob_std, g.overfit_events, g.diverged, g.grad_passes_mean
            )?;
        }
        write!(f, "delta ({} - {}): nat {:+.4}, rob {:+.4}", self.candidate.name, self.baseline.name, self.nat_delta, self.rob_delta)
    }
}
