use std::fs::OpenOptions;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

pub const CSV_HEADER: [&str; 6] = ["seed", "stage", "iteration", "map", "sigma", "icrm_error"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentRow {
    pub seed: u64,
    pub stage: String,
    pub iteration: u64,
    pub map: f64,
    pub sigma: f64,
    pub icrm_error: f64,
}

/// Appends rows to `path`, writing the header first if the file is new or empty.
pub fn append_rows(path: &Path, rows: &[ExperimentRow]) -> Result<()> {
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let fresh = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        writer.write_record(CSV_HEADER)?;
    }
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}
