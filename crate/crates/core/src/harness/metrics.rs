//! Append-only JSONL metrics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    /// `step1`, `warmup` or `bilevel`.
    pub phase: String,
    pub metrics: BTreeMap<String, f64>,
    /// Seconds since the writer was opened.
    pub wall_time: f64,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<usize>,
    started: Instant,
}

impl MetricsWriter {
    /// Opens `path` for appending. Existing records fix the step floor.
    pub fn open(path: &Path) -> Result<Self> {
        let last_step = if path.exists() {
            read_metrics(path)?.last().map(|r| r.step)
        } else {
            None
        };
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step,
            started: Instant::now(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn last_step(&self) -> Option<usize> {
        self.last_step
    }

    /// Appends one record. Steps must increase strictly.
    pub fn append(&mut self, step: usize, epoch: usize, phase: &str, metrics: BTreeMap<String, f64>) -> Result<()> {
        if self.last_step.is_some_and(|s| step <= s) {
            return Err(Error::Contract(format!(
                "metrics step {step} does not follow {}",
                self.last_step.unwrap_or(0)
            )));
        }
        let rec = MetricsRecord {
            step,
            epoch,
            phase: phase.to_string(),
            metrics,
            wall_time: self.started.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n")?;
        self.last_step = Some(step);
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

impl Drop for MetricsWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Rewrites `path` keeping only the records `keep` accepts. A missing file
/// is left missing.
pub fn retain_metrics(path: &Path, keep: impl Fn(&MetricsRecord) -> bool) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut text = String::new();
    for r in read_metrics(path)?.into_iter().filter(|r| keep(r)) {
        text.push_str(&serde_json::to_string(&r)?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// `(step, value)` pairs of one named metric.
pub fn series(records: &[MetricsRecord], name: &str) -> Vec<(f64, f64)> {
    records
        .iter()
        .filter_map(|r| r.metrics.get(name).map(|&v| (r.step as f64, v)))
        .collect()
}
