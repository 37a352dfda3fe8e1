//! Append-only JSONL metrics with a schema header line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_SCHEMA: &str = "edge-grpo-metrics/1";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GecCounts {
    pub regenerated: usize,
    pub injected: usize,
    pub replaced: usize,
    pub untouched: usize,
}

impl GecCounts {
    pub fn total(&self) -> usize {
        self.regenerated + self.injected + self.replaced + self.untouched
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub mean_reward: f64,
    /// Population variance of the advantages fed to the loss.
    pub advantage_variance: f64,
    /// Same, before entropy scaling.
    pub base_advantage_variance: f64,
    pub mean_entropy: f64,
    pub collapsed_group: bool,
    /// Rewards of the raw rollouts (before any correction) were identical.
    pub pre_gec_collapsed: bool,
    pub entropy_guard: bool,
    pub gec_counts: GecCounts,
    pub objective: f64,
    pub clip_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<u64>,
}

/// Field names accepted by [`MetricsRecord::field`] (and the CSV exporter).
pub const NUMERIC_COLUMNS: &[&str] = &[
    "step",
    "mean_reward",
    "advantage_variance",
    "base_advantage_variance",
    "mean_entropy",
    "collapsed_group",
    "pre_gec_collapsed",
    "entropy_guard",
    "regenerated",
    "injected",
    "replaced",
    "untouched",
    "objective",
    "clip_fraction",
    "eval_accuracy",
    "wall_ms",
];

/// A column value as it appears in exports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FieldValue {
    Int(u64),
    Float(f64),
    Bool(bool),
    Missing,
}

impl MetricsRecord {
    pub fn field(&self, name: &str) -> Option<FieldValue> {
        use FieldValue::*;
        let opt_f = |v: Option<f64>| v.map_or(Missing, Float);
        Some(match name {
            "step" => Int(self.step as u64),
            "mean_reward" => Float(self.mean_reward),
            "advantage_variance" => Float(self.advantage_variance),
            "base_advantage_variance" => Float(self.base_advantage_variance),
            "mean_entropy" => Float(self.mean_entropy),
            "collapsed_group" => Bool(self.collapsed_group),
            "pre_gec_collapsed" => Bool(self.pre_gec_collapsed),
            "entropy_guard" => Bool(self.entropy_guard),
            "regenerated" => Int(self.gec_counts.regenerated as u64),
            "injected" => Int(self.gec_counts.injected as u64),
            "replaced" => Int(self.gec_counts.replaced as u64),
            "untouched" => Int(self.gec_counts.untouched as u64),
            "objective" => Float(self.objective),
            "clip_fraction" => Float(self.clip_fraction),
            "eval_accuracy" => opt_f(self.eval_accuracy),
            "wall_ms" => self.wall_ms.map_or(Missing, Int),
            _ => return None,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    schema: String,
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Creates (truncating) `path` and writes the schema header.
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        let header = serde_json::to_string(&Header {
            schema: METRICS_SCHEMA.to_string(),
        })?;
        w.write_line(&header)?;
        Ok(w)
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = serde_json::to_string(record)?;
        self.write_line(&line)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        Ok(self.path)
    }
}

/// Reads a metrics file. An empty file yields no records; a present header
/// must name the supported schema.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        if i == 0 {
            if let Ok(h) = serde_json::from_str::<Header>(&line) {
                if h.schema != METRICS_SCHEMA {
                    return Err(err(format!(
                        "unsupported schema {:?}, expected {METRICS_SCHEMA:?}",
                        h.schema
                    )));
                }
                continue;
            }
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}
