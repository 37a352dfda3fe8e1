//! Offline analysis of response logs and metrics export.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::{calibration_fractions, rcm, CalibrationStats, EntropyRecord};
use crate::error::{Error, Result};
use crate::metrics::{read_metrics, FieldValue, MetricsRecord, NUMERIC_COLUMNS};

/// Self-reflection markers, matched case-insensitively as plain substrings.
pub const REFLECTION_KEYWORDS: [&str; 15] = [
    "check again",
    "recheck",
    "double-check",
    "rethink",
    "think again",
    "reevaluate",
    "re-evaluate",
    "re-examine",
    "verify again",
    "reevaluation",
    "reexamine",
    "reanalyze",
    "reassess",
    "reconsider",
    "go over",
];

pub fn detect_reflection(text: &str) -> bool {
    let lower = text.to_lowercase();
    REFLECTION_KEYWORDS.iter().any(|k| lower.contains(k))
}

/// Keywords present in `text`, in table order.
pub fn matched_keywords(text: &str) -> Vec<&'static str> {
    let lower = text.to_lowercase();
    REFLECTION_KEYWORDS
        .iter()
        .copied()
        .filter(|k| lower.contains(k))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLogRecord {
    pub id: String,
    #[serde(default)]
    pub question_text: String,
    pub response_text: String,
    pub correct: bool,
    #[serde(default)]
    pub entropy: Option<f64>,
    pub temperature: f64,
    #[serde(default)]
    pub model_tag: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracySplit {
    pub total: usize,
    pub correct: usize,
    pub reflective: usize,
    pub reflective_correct: usize,
}

impl AccuracySplit {
    fn add(&mut self, correct: bool, reflective: bool) {
        self.total += 1;
        self.correct += correct as usize;
        if reflective {
            self.reflective += 1;
            self.reflective_correct += correct as usize;
        }
    }

    fn ratio(k: usize, n: usize) -> Option<f64> {
        (n > 0).then(|| k as f64 / n as f64)
    }

    pub fn overall_acc(&self) -> Option<f64> {
        Self::ratio(self.correct, self.total)
    }

    pub fn reflection_acc(&self) -> Option<f64> {
        Self::ratio(self.reflective_correct, self.reflective)
    }

    pub fn no_reflection_acc(&self) -> Option<f64> {
        Self::ratio(
            self.correct - self.reflective_correct,
            self.total - self.reflective,
        )
    }
}

/// Statistics for one `(model_tag, temperature)` bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub model_tag: String,
    pub temperature: f64,
    pub records: usize,
    pub with_entropy: usize,
    pub overall_acc: Option<f64>,
    pub reflection_acc: Option<f64>,
    /// `None` when the bucket lacks a correct or an incorrect record with
    /// entropy.
    pub rcm: Option<f64>,
    pub calibration: Option<CalibrationStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub records: usize,
    pub malformed_lines: usize,
    /// Records without an entropy, left out of RCM and calibration.
    pub missing_entropy: usize,
    pub counts: AccuracySplit,
    pub overall_acc: f64,
    pub reflection_acc: Option<f64>,
    pub no_reflection_acc: Option<f64>,
    pub keyword_hits: BTreeMap<String, usize>,
    /// Sorted by model tag, then temperature.
    pub buckets: Vec<BucketReport>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct TempKey(f64);

impl Eq for TempKey {}

impl PartialOrd for TempKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for TempKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Builds a report from parsed records.
pub fn analyze_records(
    records: &[ResponseLogRecord],
    malformed_lines: usize,
) -> Result<AnalysisReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no valid response records"));
    }
    let mut counts = AccuracySplit::default();
    let mut keyword_hits: BTreeMap<String, usize> = REFLECTION_KEYWORDS
        .iter()
        .map(|k| (k.to_string(), 0))
        .collect();
    let mut buckets: BTreeMap<(String, TempKey), (AccuracySplit, Vec<EntropyRecord>)> =
        BTreeMap::new();
    let mut missing_entropy = 0;

    for r in records {
        let hits = matched_keywords(&r.response_text);
        for k in &hits {
            *keyword_hits.get_mut(*k).expect("keyword table") += 1;
        }
        let reflective = !hits.is_empty();
        counts.add(r.correct, reflective);
        let bucket = buckets
            .entry((r.model_tag.clone(), TempKey(r.temperature)))
            .or_default();
        bucket.0.add(r.correct, reflective);
        match r.entropy {
            Some(e) => bucket
                .1
                .push(EntropyRecord::new(&r.id, e, r.correct, r.temperature)),
            None => missing_entropy += 1,
        }
    }

    let buckets = buckets
        .into_iter()
        .map(|((model_tag, temp), (split, entropies))| BucketReport {
            model_tag,
            temperature: temp.0,
            records: split.total,
            with_entropy: entropies.len(),
            overall_acc: split.overall_acc(),
            reflection_acc: split.reflection_acc(),
            rcm: rcm(&entropies).ok(),
            calibration: calibration_fractions(&entropies).ok(),
        })
        .collect();

    Ok(AnalysisReport {
        records: counts.total,
        malformed_lines,
        missing_entropy,
        overall_acc: counts.overall_acc().unwrap_or(0.0),
        reflection_acc: counts.reflection_acc(),
        no_reflection_acc: counts.no_reflection_acc(),
        counts,
        keyword_hits,
        buckets,
    })
}

fn valid_record(r: &ResponseLogRecord) -> bool {
    r.temperature.is_finite()
        && r.temperature > 0.0
        && r.entropy.is_none_or(|e| e.is_finite() && e >= 0.0)
}

/// Parses a JSONL response log and analyzes it. Lines that fail to parse
/// or violate record invariants are counted, not fatal.
pub fn analyze_log(path: &Path) -> Result<AnalysisReport> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut malformed = 0;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<ResponseLogRecord>(&line) {
            Ok(r) if valid_record(&r) => records.push(r),
            _ => malformed += 1,
        }
    }
    analyze_records(&records, malformed)
}

fn format_field(v: FieldValue) -> String {
    match v {
        FieldValue::Int(i) => i.to_string(),
        // 17 significant digits round-trip every f64
        FieldValue::Float(f) => format!("{f:.16e}"),
        FieldValue::Bool(b) => (b as u8).to_string(),
        FieldValue::Missing => String::new(),
    }
}

/// Writes the selected metric columns as CSV, one row per step.
pub fn export_csv(metrics_path: &Path, columns: &[String], out: &Path) -> Result<usize> {
    let unknown: Vec<String> = columns
        .iter()
        .filter(|c| !NUMERIC_COLUMNS.contains(&c.as_str()))
        .cloned()
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownColumns(unknown));
    }
    if columns.is_empty() {
        return Err(Error::invalid("no columns selected"));
    }
    let records = read_metrics(metrics_path)?;
    let file = std::fs::File::create(out).map_err(|e| Error::io(out, e))?;
    write_csv(&records, columns, file)?;
    Ok(records.len())
}

pub fn write_csv<W: std::io::Write>(
    records: &[MetricsRecord],
    columns: &[String],
    out: W,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(out);
    w.write_record(columns)?;
    for r in records {
        let row: Vec<String> = columns
            .iter()
            .map(|c| format_field(r.field(c).unwrap_or(FieldValue::Missing)))
            .collect();
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
