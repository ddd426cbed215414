//! CSV and JSON reports.
//!
//! Latency CSV columns: `kind,length,reps,median_ms,per_unit_ms,steps`.
//! Metrics CSV columns: `task,model,metric,value,n,steps,samples,tau,seed`;
//! settings that do not apply are empty. Both layouts are stable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::latency::LatencyRecord;
use super::metrics::{Metric, MetricReport, SettingsEcho};
use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};

pub const LATENCY_CSV: &str = "latency.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const SUMMARY_JSON: &str = "summary.json";

#[derive(Debug, Serialize, Deserialize)]
struct MetricRow {
    task: String,
    model: String,
    metric: Metric,
    value: f64,
    n: usize,
    steps: Option<usize>,
    samples: Option<usize>,
    tau: Option<f32>,
    seed: Option<u64>,
}

impl From<&MetricReport> for MetricRow {
    fn from(r: &MetricReport) -> Self {
        MetricRow {
            task: r.task.clone(),
            model: r.model.clone(),
            metric: r.metric,
            value: r.value,
            n: r.n,
            steps: r.settings.steps,
            samples: r.settings.samples,
            tau: r.settings.tau,
            seed: r.settings.seed,
        }
    }
}

impl From<MetricRow> for MetricReport {
    fn from(r: MetricRow) -> Self {
        MetricReport {
            task: r.task,
            model: r.model,
            metric: r.metric,
            value: r.value,
            n: r.n,
            settings: SettingsEcho {
                steps: r.steps,
                samples: r.samples,
                tau: r.tau,
                seed: r.seed,
            },
        }
    }
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Report(e.to_string()))
}

pub fn latency_csv(records: &[LatencyRecord]) -> Result<Vec<u8>> {
    to_csv(records)
}

pub fn metrics_csv(reports: &[MetricReport]) -> Result<Vec<u8>> {
    to_csv(reports.iter().map(MetricRow::from))
}

pub fn parse_latency_csv(bytes: &[u8]) -> Result<Vec<LatencyRecord>> {
    csv::Reader::from_reader(bytes)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

pub fn parse_metrics_csv(bytes: &[u8]) -> Result<Vec<MetricReport>> {
    csv::Reader::from_reader(bytes)
        .deserialize::<MetricRow>()
        .map(|r| r.map(MetricReport::from).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SummaryRecord {
    Latency(LatencyRecord),
    Metric(MetricReport),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub records: Vec<SummaryRecord>,
}

/// Writes the CSVs that have rows plus the JSON summary into `out_dir`;
/// returns the written paths. Nothing is written when both inputs are empty.
pub fn report(
    out_dir: &Path,
    latency: &[LatencyRecord],
    metrics: &[MetricReport],
    config_hash: &str,
    seeds: &[u64],
) -> Result<Vec<PathBuf>> {
    if latency.is_empty() && metrics.is_empty() {
        return Err(Error::Report("nothing to report".into()));
    }
    if let Some(bad) = metrics
        .iter()
        .find(|m| !(0.0..=1.0).contains(&m.value) || m.n == 0)
    {
        return Err(Error::Report(format!(
            "metric {:?} of {} is out of range",
            bad.metric, bad.task
        )));
    }
    if let Some(bad) = latency.iter().find(|r| !(r.median_ms > 0.0) || r.reps < 3) {
        return Err(Error::Report(format!(
            "latency record for length {} is invalid",
            bad.length
        )));
    }
    // Serialize everything before touching the filesystem.
    let mut files = Vec::new();
    if !latency.is_empty() {
        files.push((out_dir.join(LATENCY_CSV), latency_csv(latency)?));
    }
    if !metrics.is_empty() {
        files.push((out_dir.join(METRICS_CSV), metrics_csv(metrics)?));
    }
    let summary = Summary {
        config_hash: config_hash.to_string(),
        seeds: seeds.to_vec(),
        records: latency
            .iter()
            .cloned()
            .map(SummaryRecord::Latency)
            .chain(metrics.iter().cloned().map(SummaryRecord::Metric))
            .collect(),
    };
    files.push((
        out_dir.join(SUMMARY_JSON),
        serde_json::to_vec_pretty(&summary)?,
    ));
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(files.len());
    for (p, bytes) in files {
        write_atomic(&p, &bytes)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::latency::DecoderKind;

    fn sample_metrics() -> Vec<MetricReport> {
        vec![
            MetricReport {
                task: "cipher".into(),
                model: "diffusion".into(),
                metric: Metric::ExactMatch,
                value: 7.0 / 9.0,
                n: 9,
                settings: SettingsEcho {
                    steps: Some(10),
                    samples: Some(8),
                    tau: Some(0.2),
                    seed: Some(3),
                },
            },
            MetricReport {
                task: "copy".into(),
                model: "ar".into(),
                metric: Metric::TokenF1,
                value: 0.1 + 0.2,
                n: 1,
                settings: SettingsEcho::default(),
            },
        ]
    }

    fn sample_latency() -> Vec<LatencyRecord> {
        vec![LatencyRecord {
            kind: DecoderKind::Diffusion,
            length: 64,
            reps: 5,
            median_ms: 1.0 / 3.0,
            per_unit_ms: 1.0 / 30.0,
            steps: 10,
        }]
    }

    #[test]
    fn csv_round_trips_exactly() {
        let m = sample_metrics();
        assert_eq!(parse_metrics_csv(&metrics_csv(&m).unwrap()).unwrap(), m);
        let l = sample_latency();
        assert_eq!(parse_latency_csv(&latency_csv(&l).unwrap()).unwrap(), l);
        let header = String::from_utf8(latency_csv(&l).unwrap()).unwrap();
        assert!(header.starts_with("kind,length,reps,median_ms,per_unit_ms,steps\n"));
        let header = String::from_utf8(metrics_csv(&m).unwrap()).unwrap();
        assert!(header.starts_with("task,model,metric,value,n,steps,samples,tau,seed\n"));
    }

    #[test]
    fn empty_report_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("r");
        assert!(report(&out, &[], &[], "h", &[1]).is_err());
        assert!(!out.exists());
    }

    #[test]
    fn summary_carries_hash_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        let paths = report(
            dir.path(),
            &sample_latency(),
            &sample_metrics(),
            "abc123",
            &[1, 2],
        )
        .unwrap();
        assert_eq!(paths.len(), 3);
        let s: Summary =
            serde_json::from_slice(&std::fs::read(dir.path().join(SUMMARY_JSON)).unwrap()).unwrap();
        assert_eq!(s.config_hash, "abc123");
        assert_eq!(s.seeds, vec![1, 2]);
        assert_eq!(s.records.len(), 3);
    }
}
