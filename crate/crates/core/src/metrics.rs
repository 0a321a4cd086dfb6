//! Per-step metrics records, written as JSON lines.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub frozen_prefix: usize,
    pub target: String,
    pub flops_step: f64,
    #[serde(flatten)]
    pub extras: BTreeMap<String, f64>,
}

/// Append-only JSONL writer; one writer per file.
pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn append(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    /// Truncates any existing file.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, rec: &StepRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}

pub fn append_metrics(rec: &StepRecord, path: &Path) -> Result<()> {
    MetricsWriter::append(path)?.write(rec)
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_extras() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        let mut extras = BTreeMap::new();
        extras.insert("teacher_student_distance".to_string(), 0.1 + 0.2);
        let rec = StepRecord {
            step: 3,
            loss: 1.0 / 3.0,
            lr: 1e-3,
            frozen_prefix: 2,
            target: "layer2".into(),
            flops_step: 12.0,
            extras,
        };
        append_metrics(&rec, &p).unwrap();
        append_metrics(&rec, &p).unwrap();
        let back = read_metrics(&p).unwrap();
        assert_eq!(back, vec![rec.clone(), rec]);
    }
}
