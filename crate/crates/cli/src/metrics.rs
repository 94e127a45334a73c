//! Append-only JSONL metrics stream, one self-contained line per eval point.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub l_r: f64,
    pub l_lp: f64,
    pub aux: f64,
    pub len_loss: f64,
    pub joint: f64,
    /// Per-token log-perplexity of reconstructions (base e) == l_r.
    pub log_pplx: f64,
    /// Per-slice fraction of distinct codewords used since the last record.
    pub usage: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_ce: Option<f64>,
}

pub struct MetricsWriter {
    file: std::io::BufWriter<std::fs::File>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            file: std::io::BufWriter::new(std::fs::File::create(path)?),
        })
    }

    pub fn append(path: &Path) -> Result<Self> {
        Ok(MetricsWriter {
            file: std::io::BufWriter::new(
                std::fs::OpenOptions::new().create(true).append(true).open(path)?,
            ),
        })
    }

    pub fn write(&mut self, rec: &MetricsRecord) -> Result<()> {
        serde_json::to_writer(&mut self.file, rec)?;
        self.file.write_all(b"\n")?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn read_all(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}
