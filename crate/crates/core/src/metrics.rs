//! Append-only line-delimited metric logs.
//!
//! Each line is one JSON record. The first line of a file is a header
//! carrying the config fingerprint and schema version. Non-finite floats
//! serialize to `null`; the reader restores them as NaN and flags such
//! records instead of dropping them.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

fn nan_from_null<'de, D>(d: D) -> Result<f64, D::Error>
where
    D: Deserializer<'de>,
{
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MetricLine {
    Header(HeaderRecord),
    Metric(MetricRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRecord {
    pub fingerprint: String,
    pub schema_version: u32,
    pub variant: String,
    /// Resolved regularizer weights, so ablation runs are auditable from
    /// the log alone.
    pub lambda_i: f64,
    pub lambda_p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MetricRecord {
    pub iteration: u64,
    /// Environment frames consumed so far.
    pub frames: u64,
    #[serde(deserialize_with = "nan_from_null")]
    pub test_return_ep1: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub test_return_ep2: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub nmi: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub train_return_ep1: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub train_return_ep2: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub elbo_objective: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub recon_loglik: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub latent_kl: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub cluster_kl: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub in_trial: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub prior_reg: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub explore_policy_loss: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub explore_value_loss: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub exploit_policy_loss: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub exploit_value_loss: f64,
}

impl MetricRecord {
    pub fn has_non_finite(&self) -> bool {
        [
            self.test_return_ep1,
            self.test_return_ep2,
            self.nmi,
            self.train_return_ep1,
            self.train_return_ep2,
            self.elbo_objective,
            self.recon_loglik,
            self.latent_kl,
            self.cluster_kl,
            self.in_trial,
            self.prior_reg,
            self.explore_policy_loss,
            self.explore_value_loss,
            self.exploit_policy_loss,
            self.exploit_value_loss,
        ]
        .iter()
        .any(|v| !v.is_finite())
    }
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics io: {0}")]
    Io(#[from] std::io::Error),
    #[error("metrics encode: {0}")]
    Encode(#[from] serde_json::Error),
}

pub struct MetricWriter {
    out: BufWriter<File>,
}

impl MetricWriter {
    /// Creates the file and writes the header line.
    pub fn create(path: &Path, header: &HeaderRecord) -> Result<Self, MetricsError> {
        let file = File::create(path)?;
        let mut w = Self { out: BufWriter::new(file) };
        w.write_line(&MetricLine::Header(header.clone()))?;
        Ok(w)
    }

    /// Opens an existing log for appending.
    pub fn append(path: &Path) -> Result<Self, MetricsError> {
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(Self { out: BufWriter::new(file) })
    }

    pub fn write_record(&mut self, record: &MetricRecord) -> Result<(), MetricsError> {
        self.write_line(&MetricLine::Metric(record.clone()))
    }

    fn write_line(&mut self, line: &MetricLine) -> Result<(), MetricsError> {
        serde_json::to_writer(&mut self.out, line)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct ReadWarnings {
    pub corrupt_lines: usize,
    pub non_finite_records: usize,
}

pub struct MetricsFile {
    pub header: Option<HeaderRecord>,
    pub records: Vec<MetricRecord>,
    pub warnings: ReadWarnings,
}

/// Reads a metrics log, skipping corrupt lines (counted, not fatal) and
/// flagging records that contain non-finite values.
pub fn read_metrics(path: &Path) -> Result<MetricsFile, MetricsError> {
    let file = File::open(path)?;
    let mut header = None;
    let mut records = Vec::new();
    let mut warnings = ReadWarnings::default();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<MetricLine>(&line) {
            Ok(MetricLine::Header(h)) => header = Some(h),
            Ok(MetricLine::Metric(m)) => {
                if m.has_non_finite() {
                    warnings.non_finite_records += 1;
                }
                records.push(m);
            }
            Err(_) => warnings.corrupt_lines += 1,
        }
    }
    Ok(MetricsFile { header, records, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header() -> HeaderRecord {
        HeaderRecord {
            fingerprint: "deadbeefdeadbeef".into(),
            schema_version: METRICS_SCHEMA_VERSION,
            variant: "full".into(),
            lambda_i: 1.0,
            lambda_p: 0.1,
        }
    }

    #[test]
    fn write_then_read_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricWriter::create(&path, &header()).unwrap();
        let mut want = Vec::new();
        for i in 0..100u64 {
            let r = MetricRecord {
                iteration: i,
                frames: i * 1600,
                test_return_ep1: -(i as f64) * 0.5,
                test_return_ep2: -(i as f64) * 0.25,
                nmi: (i as f64 / 100.0).min(1.0),
                ..MetricRecord::default()
            };
            w.write_record(&r).unwrap();
            want.push(r);
        }
        drop(w);
        let read = read_metrics(&path).unwrap();
        assert_eq!(read.header, Some(header()));
        assert_eq!(read.records, want);
        assert_eq!(read.warnings, ReadWarnings::default());
    }

    #[test]
    fn empty_file_reads_as_empty_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let read = read_metrics(&path).unwrap();
        assert!(read.records.is_empty());
        assert!(read.header.is_none());
    }

    #[test]
    fn corrupt_lines_are_skipped_and_counted() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricWriter::create(&path, &header()).unwrap();
        w.write_record(&MetricRecord { iteration: 1, ..Default::default() }).unwrap();
        drop(w);
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.push_str("{ not json }\n");
        content.push_str("{\"kind\":\"metric\",\"iteration\":2}\n"); // missing fields
        std::fs::write(&path, content).unwrap();

        let read = read_metrics(&path).unwrap();
        assert_eq!(read.records.len(), 1);
        assert_eq!(read.warnings.corrupt_lines, 2);
    }

    #[test]
    fn nan_losses_are_stored_and_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut w = MetricWriter::create(&path, &header()).unwrap();
        let r = MetricRecord { iteration: 3, elbo_objective: f64::NAN, ..Default::default() };
        w.write_record(&r).unwrap();
        drop(w);
        let read = read_metrics(&path).unwrap();
        assert_eq!(read.records.len(), 1);
        assert!(read.records[0].elbo_objective.is_nan());
        assert_eq!(read.warnings.non_finite_records, 1);
    }
}
