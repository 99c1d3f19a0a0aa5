//! Per-step metrics and validation logs, as append-only CSV.

use std::fs::{self, OpenOptions};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub loss_sup: f64,
    pub loss_cont: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub epoch: usize,
    pub iteration: u64,
    pub map: f64,
}

/// A row type of one of the run logs.
pub trait LogRow: Serialize + DeserializeOwned {
    const HEADER: &'static [&'static str];
    fn iteration(&self) -> u64;
}

impl LogRow for StepMetrics {
    const HEADER: &'static [&'static str] = &["iteration", "epoch", "lambda", "loss_sup", "loss_cont", "lr", "grad_norm", "wall_ms"];
    fn iteration(&self) -> u64 {
        self.iteration
    }
}

impl LogRow for ValidationRow {
    const HEADER: &'static [&'static str] = &["epoch", "iteration", "map"];
    fn iteration(&self) -> u64 {
        self.iteration
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_rows<T: LogRow>(path: &Path, rows: &[T]) -> Result<()> {
    let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    if fresh {
        w.write_record(T::HEADER)?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
        .collect()
}

/// Drops rows at or beyond `iteration`, e.g. steps logged after the last
/// checkpoint of an interrupted run. Missing files are left alone.
pub fn truncate_from<T: LogRow>(path: &Path, iteration: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let rows: Vec<T> = read_rows(path)?;
    let kept: Vec<T> = rows.into_iter().filter(|r| r.iteration() < iteration).collect();
    let tmp = path.with_extension("tmp");
    if tmp.exists() {
        fs::remove_file(&tmp)?;
    }
    append_rows(&tmp, &kept)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(i: u64) -> StepMetrics {
        StepMetrics {
            iteration: i,
            epoch: 0,
            lambda: 0.5,
            loss_sup: 1.25,
            loss_cont: 0.1,
            lr: 1e-3,
            grad_norm: 2.0,
            wall_ms: 3.0,
        }
    }

    #[test]
    fn append_read_truncate() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("metrics.csv");
        append_rows::<StepMetrics>(&p, &[]).unwrap();
        assert_eq!(
            fs::read_to_string(&p).unwrap(),
            "iteration,epoch,lambda,loss_sup,loss_cont,lr,grad_norm,wall_ms\n"
        );
        append_rows(&p, &[row(0), row(1)]).unwrap();
        append_rows(&p, &[row(2)]).unwrap();
        let back: Vec<StepMetrics> = read_rows(&p).unwrap();
        assert_eq!(back, vec![row(0), row(1), row(2)]);
        truncate_from::<StepMetrics>(&p, 2).unwrap();
        assert_eq!(read_rows::<StepMetrics>(&p).unwrap(), vec![row(0), row(1)]);
        truncate_from::<StepMetrics>(&p, 0).unwrap();
        assert!(read_rows::<StepMetrics>(&p).unwrap().is_empty());
    }
}
