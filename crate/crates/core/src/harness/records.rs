use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpreters::Method;
use crate::metrics::{IouReport, SampleStats};

pub const SCHEMA: &str = "v1";

/// One attacked sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub schema: String,
    pub config_hash: String,
    /// Index into the configured dataset.
    pub sample_id: usize,
    pub true_label: usize,
    pub source_model: String,
    pub target_model: String,
    pub interpreter: Method,
    pub defense: Option<String>,
    pub success: bool,
    pub queries: u64,
    pub adv_label: Option<usize>,
    pub adv_confidence: Option<f64>,
    pub noise_rate: Option<f64>,
    pub iou: Option<IouReport>,
    /// Pixels the edge operator left open for seeding.
    pub gate_pixels: Option<usize>,
    /// The adversarial input on success, `[C, H, W]` flattened.
    pub adv_input: Option<Vec<f64>>,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub started_unix_ms: Option<u128>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

impl ResultRecord {
    pub fn stats(&self) -> SampleStats {
        SampleStats {
            success: self.success,
            queries: self.queries,
            noise_rate: self.noise_rate,
            iou_mean: self.iou.as_ref().map(|r| r.mean),
            adv_confidence: self.adv_confidence,
        }
    }
}

pub fn to_jsonl(records: &[ResultRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn parse_jsonl(text: &str) -> Result<Vec<ResultRecord>> {
    let mut records = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: ResultRecord =
            serde_json::from_str(line).map_err(|e| Error::Format(format!("record on line {}: {e}", n + 1)))?;
        if r.schema != SCHEMA {
            return Err(Error::Format(format!("line {}: unknown schema {:?}", n + 1, r.schema)));
        }
        records.push(r);
    }
    Ok(records)
}

/// Appends records to `path`, creating it if needed.
pub fn append_jsonl(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(to_jsonl(records)?.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<ResultRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}
