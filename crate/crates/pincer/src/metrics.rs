//! Metric files: per-epoch JSON lines for both stages and the evaluation report.

use std::path::Path;

use pincer_core::eval::MetricReport;
use pincer_core::stage1::Stage1EpochMetrics;
use pincer_core::stage2::Stage2EpochMetrics;
use serde::{Deserialize, Serialize};

use crate::dataset::{read_jsonl, write_jsonl};
use crate::error::{Context, Result};
use crate::manifest;

pub fn write_stage1(path: &Path, history: &[Stage1EpochMetrics]) -> Result<()> {
    write_jsonl(path, history)
}

pub fn read_stage1(path: &Path) -> Result<Vec<Stage1EpochMetrics>> {
    read_jsonl(path)
}

pub fn write_stage2(path: &Path, history: &[Stage2EpochMetrics]) -> Result<()> {
    write_jsonl(path, history)
}

pub fn read_stage2(path: &Path) -> Result<Vec<Stage2EpochMetrics>> {
    read_jsonl(path)
}

/// Evaluation output: the report plus how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub stage: String,
    pub mode: String,
    pub n_probe: usize,
    pub split: String,
    #[serde(flatten)]
    pub report: MetricReport,
}

pub fn write_eval(path: &Path, rec: &EvalRecord) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(rec).expect("serializable report");
    bytes.push(b'\n');
    manifest::write_atomic(path, &bytes)
}

pub fn read_eval(path: &Path) -> Result<EvalRecord> {
    let bytes = manifest::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| pincer_core::Error::Format(e.to_string()))
        .at(path)
}
