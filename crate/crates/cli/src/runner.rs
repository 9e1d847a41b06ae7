//! Executes expanded runs and writes their outputs.
//!
//! Layout under `<out_root>/<output_dir>/`:
//! `results.csv` plus `runs/<run_id>/{manifest.json, history.csv,
//! epochs.csv, batches.csv, model.rtlm}`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use robustlab::data::Dataset;
use robustlab::diagnostics::{natural_accuracy, robust_accuracy};
use robustlab::trainers::{train, RunRecord};
use robustlab::{init_model, Error as CoreError, ModelParams};
use serde::{Deserialize, Serialize};

use crate::config::{DatasetSpec, ExperimentConfig, RunPlan};
use crate::output::{write_batches, write_epochs, write_history, write_results};
use crate::{CliError, Result};

/// Environment variable naming the output root (default `results`).
pub const OUT_ENV: &str = "ROBUSTLAB_OUT";

pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub force: bool,
    pub workers: usize,
    pub seed_override: Option<Vec<u64>>,
    pub out_root: PathBuf,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            force: false,
            workers: 1,
            seed_override: None,
            out_root: default_out_root(),
        }
    }
}

/// One line of `results.csv`. Field order is the column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub run_id: String,
    pub label: String,
    pub strategy: String,
    pub swept: String,
    pub seed: u64,
    pub nat_acc: f64,
    pub rob_acc: f64,
    pub train_minutes: f64,
    pub grad_pass_count: usize,
    pub overfit_events: usize,
    pub diverged: bool,
}

pub const RESULT_COLUMNS: [&str; 11] = [
    "run_id",
    "label",
    "strategy",
    "swept",
    "seed",
    "nat_acc",
    "rob_acc",
    "train_minutes",
    "grad_pass_count",
    "overfit_events",
    "diverged",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub code_version: String,
    pub plan: RunPlan,
    pub dataset_provenance: String,
    pub complete: bool,
    pub row: ResultRow,
}

#[derive(Debug)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub rows: Vec<ResultRow>,
    /// Runs trained by this invocation.
    pub trained: usize,
    /// Runs found complete on disk and reused.
    pub skipped: usize,
    /// `(run_id, error)` for runs that failed outright.
    pub failures: Vec<(String, String)>,
}

pub fn code_version() -> String {
    match option_env!("ROBUSTLAB_GIT_REV") {
        Some(rev) => format!("{} ({rev})", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

fn read_manifest(dir: &Path) -> Option<Manifest> {
    let text = fs::read_to_string(dir.join("manifest.json")).ok()?;
    serde_json::from_str::<Manifest>(&text).ok().filter(|m| m.complete)
}

/// Runs every (variant x sweep point x seed) of `config`.
pub fn run(config: &ExperimentConfig, opts: &RunOptions) -> Result<RunSummary> {
    let mut config = config.clone();
    if let Some(seeds) = &opts.seed_override {
        config.seeds = seeds.clone();
    }
    let plans = config.expand()?;
    let out_dir = opts.out_root.join(config.output_dir());
    fs::create_dir_all(out_dir.join("runs")).map_err(|e| CliError::io(&out_dir, e))?;

    let mut datasets: Vec<(DatasetSpec, (Dataset, Dataset))> = Vec::new();
    for p in &plans {
        if !datasets.iter().any(|(s, _)| *s == p.config.dataset) {
            let loaded = p.config.dataset.load()?;
            datasets.push((p.config.dataset.clone(), loaded));
        }
    }
    let data_for = |p: &RunPlan| &datasets.iter().find(|(s, _)| *s == p.config.dataset).expect("loaded above").1;

    let slots: Vec<Mutex<Option<std::result::Result<(ResultRow, bool), String>>>> = plans.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = opts.workers.clamp(1, plans.len().max(1));
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(plan) = plans.get(i) else { break };
                let dir = out_dir.join("runs").join(&plan.run_id);
                let outcome = match (opts.force, read_manifest(&dir)) {
                    (false, Some(m)) if m.plan == *plan => Ok((m.row, false)),
                    _ => execute(plan, data_for(plan), &dir).map(|r| (r, true)).map_err(|e| e.to_string()),
                };
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });

    let mut summary = RunSummary {
        out_dir: out_dir.clone(),
        rows: Vec::new(),
        trained: 0,
        skipped: 0,
        failures: Vec::new(),
    };
    for (plan, slot) in plans.iter().zip(slots) {
        match slot.into_inner().expect("slot lock").expect("every plan ran") {
            Ok((row, fresh)) => {
                if fresh {
                    summary.trained += 1;
                } else {
                    summary.skipped += 1;
                }
                summary.rows.push(row);
            }
            Err(e) => summary.failures.push((plan.run_id.clone(), e)),
        }
    }
    write_results(&out_dir.join("results.csv"), &summary.rows)?;
    Ok(summary)
}

/// Trains, evaluates and writes one run.
pub fn execute(plan: &RunPlan, data: &(Dataset, Dataset), dir: &Path) -> Result<ResultRow> {
    let (train_set, test_set) = data;
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let spec = plan.train_spec();
    let init = init_model(&plan.model_spec())?;
    let start = Instant::now();
    let (params, record, diverged): (ModelParams, RunRecord, bool) = match train(&spec, init, train_set, test_set) {
        Ok(out) => (out.params, out.record, false),
        Err(CoreError::Diverged { report, .. }) => (report.params, report.record, true),
        Err(e) => return Err(e.into()),
    };
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let nat_acc = natural_accuracy(&params, test_set)?;
    let rob_acc = robust_accuracy(&params, test_set, &plan.eval_spec())?;

    let row = ResultRow {
        run_id: plan.run_id.clone(),
        label: plan.label.clone(),
        strategy: spec.strategy.to_string(),
        swept: plan.swept_string(),
        seed: plan.seed,
        nat_acc,
        rob_acc,
        train_minutes: minutes,
        grad_pass_count: record.grad_passes(),
        overfit_events: record.overfit_events.len(),
        diverged,
    };
    write_history(&dir.join("history.csv"), &record)?;
    write_epochs(&dir.join("epochs.csv"), &record)?;
    write_batches(&dir.join("batches.csv"), &record)?;
    let model_path = dir.join("model.rtlm");
    let f = fs::File::create(&model_path).map_err(|e| CliError::io(&model_path, e))?;
    let mut w = std::io::BufWriter::new(f);
    params.save(&mut w)?;
    w.flush().map_err(|e| CliError::io(&model_path, e))?;
    let manifest = Manifest {
        run_id: plan.run_id.clone(),
        code_version: code_version(),
        plan: plan.clone(),
        dataset_provenance: train_set.provenance().to_string(),
        complete: true,
        row: row.clone(),
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| CliError::Format(e.to_string()))?;
    fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(row)
}
