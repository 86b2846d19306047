use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::json;

/// Appends one JSON object per metric to `run_log.jsonl`.
pub struct RunLog {
    out: BufWriter<File>,
}

impl RunLog {
    pub fn create(dir: &Path) -> Result<Self> {
        let path = dir.join("run_log.jsonl");
        let file = File::options()
            .create(true)
            .append(true)
            .open(&path)
            .with_context(|| format!("opening {}", path.display()))?;
        Ok(RunLog {
            out: BufWriter::new(file),
        })
    }

    pub fn record(&mut self, stage: &str, epoch: usize, metric: &str, value: f64) {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs_f64())
            .unwrap_or(0.0);
        let line = json!({
            "timestamp": timestamp,
            "stage": stage,
            "epoch": epoch,
            "metric": metric,
            "value": value,
        });
        let _ = writeln!(self.out, "{line}");
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().context("flushing run log")
    }
}
