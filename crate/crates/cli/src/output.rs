//! CSV writers for run outputs.

use std::path::Path;

use robustlab::diagnostics::DIAGNOSTICS_COLUMNS;
use robustlab::trainers::RunRecord;
use serde::Serialize;

use crate::runner::ResultRow;
use crate::{CliError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let fail = |e: csv::Error| CliError::Format(format!("{}: {e}", path.display()));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Per-epoch diagnostics with exactly the diagnostics columns.
pub fn write_history(path: &Path, record: &RunRecord) -> Result<()> {
    write_rows(path, &DIAGNOSTICS_COLUMNS, record.epochs.iter().map(|e| e.diagnostics_row()))
}

pub fn write_epochs(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = writer(path)?;
    for e in &record.epochs {
        w.serialize(e).map_err(|e| CliError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_batches(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = writer(path)?;
    for b in &record.batches {
        w.serialize(b).map_err(|e| CliError::Format(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_results(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_rows(path, &crate::runner::RESULT_COLUMNS, rows)
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
    let headers = r.headers().map_err(|e| CliError::Format(e.to_string()))?.clone();
    if headers.iter().ne(crate::runner::RESULT_COLUMNS) {
        return Err(CliError::Format(format!("{}: unexpected columns {:?}", path.display(), headers)));
    }
    r.deserialize()
        .collect::<std::result::Result<Vec<ResultRow>, _>>()
        .map_err(|e| CliError::Format(format!("{}: {e}", path.display())))
}
