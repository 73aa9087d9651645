use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{Regime, Task};

/// Metric columns of results.csv, in order. Missing ones are left empty.
pub const METRIC_COLUMNS: [&str; 4] = ["accuracy", "macro_f", "auc", "ap"];

/// One downstream result with its lineage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub regime: Regime,
    pub label_fraction: f64,
    pub seed: u64,
    /// Which split the metrics were computed on.
    pub split: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_examples: usize,
    pub n_train: usize,
    pub config_hash: String,
    pub build_id: String,
}

impl RunRecord {
    pub fn csv_header() -> String {
        let mut cols = vec!["task", "regime", "label_fraction", "seed", "split"];
        cols.extend(METRIC_COLUMNS);
        cols.extend(["n_examples", "n_train", "config_hash", "build_id"]);
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols = vec![
            self.task.to_string(),
            self.regime.to_string(),
            format!("{:?}", self.label_fraction),
            self.seed.to_string(),
            self.split.clone(),
        ];
        for m in METRIC_COLUMNS {
            cols.push(self.metrics.get(m).map_or(String::new(), |v| format!("{v:?}")));
        }
        cols.extend([
            self.n_examples.to_string(),
            self.n_train.to_string(),
            self.config_hash.clone(),
            self.build_id.clone(),
        ]);
        cols.join(",")
    }
}

/// Appends `line` to a CSV under an exclusive lock, writing `header` first
/// when the file is new or empty. Safe for concurrent writer processes.
pub fn append_csv_row(path: &Path, header: &str, line: &str) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut f = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(io)?;
    f.lock().map_err(io)?;
    let len = f.seek(SeekFrom::End(0)).map_err(io)?;
    let mut buf = String::new();
    if len == 0 {
        buf.push_str(header);
        buf.push('\n');
    } else {
        let mut existing = String::new();
        f.seek(SeekFrom::Start(0)).map_err(io)?;
        f.read_to_string(&mut existing).map_err(io)?;
        if existing.lines().next() != Some(header) {
            return Err(Error::Data(format!("{} has a different header", path.display())));
        }
    }
    buf.push_str(line);
    buf.push('\n');
    f.write_all(buf.as_bytes()).map_err(io)?;
    f.flush().map_err(io)?;
    f.unlock().map_err(io)
}

pub fn append_record(path: &Path, rec: &RunRecord) -> Result<()> {
    append_csv_row(path, &RunRecord::csv_header(), &rec.csv_row())
}
