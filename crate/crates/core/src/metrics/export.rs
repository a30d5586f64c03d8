//! CSV export of a job's records.
//!
//! Rows are ordered by client then arrival; rounds by round number.
//! Timestamps are written in emulated seconds with millisecond precision.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::records::{MetricSample, StageEvent};
use super::store::{JobRecords, MetricStore, StoreError};
use crate::strategy::RoundRecord;

pub const SAMPLES_HEADER: [&str; 7] = [
    "ts_s",
    "client_id",
    "cpu_pct",
    "mem_bytes",
    "power_w",
    "net_up_bytes",
    "net_down_bytes",
];
pub const STAGE_EVENTS_HEADER: [&str; 5] = ["ts_s", "client_id", "round", "kind", "edge"];
pub const ROUNDS_HEADER: [&str; 5] = [
    "round",
    "start_s",
    "end_s",
    "mean_val_acc",
    "sampled_clients",
];

#[derive(Debug, Error)]
pub enum ExportError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportSummary {
    pub samples_csv: PathBuf,
    pub stage_events_csv: PathBuf,
    pub rounds_csv: PathBuf,
    pub samples: usize,
    pub stage_events: usize,
    pub rounds: usize,
}

fn ts(v: f64) -> String {
    format!("{v:.3}")
}

fn sorted_samples(samples: &[MetricSample]) -> Vec<&MetricSample> {
    let mut v: Vec<&MetricSample> = samples.iter().collect();
    v.sort_by_key(|s| s.client_id);
    v
}

fn sorted_events(events: &[StageEvent]) -> Vec<&StageEvent> {
    let mut v: Vec<&StageEvent> = events.iter().collect();
    v.sort_by_key(|e| e.client_id);
    v
}

pub fn write_samples(path: &Path, samples: &[MetricSample]) -> Result<usize, ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SAMPLES_HEADER)?;
    let rows = sorted_samples(samples);
    for s in &rows {
        w.write_record([
            ts(s.ts_s),
            s.client_id.to_string(),
            s.cpu_percent.to_string(),
            s.mem_bytes.to_string(),
            s.power_w.to_string(),
            s.net_up_bytes.to_string(),
            s.net_down_bytes.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows.len())
}

pub fn write_stage_events(path: &Path, events: &[StageEvent]) -> Result<usize, ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STAGE_EVENTS_HEADER)?;
    let rows = sorted_events(events);
    for e in &rows {
        w.write_record([
            ts(e.ts_s),
            e.client_id.to_string(),
            e.round.to_string(),
            e.kind.as_str().to_string(),
            e.edge.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(rows.len())
}

pub fn write_rounds(path: &Path, rounds: &[RoundRecord]) -> Result<usize, ExportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(ROUNDS_HEADER)?;
    let mut rows: Vec<&RoundRecord> = rounds.iter().collect();
    rows.sort_by_key(|r| r.round);
    for r in &rows {
        let ids: Vec<String> = r.sampled_clients.iter().map(u32::to_string).collect();
        w.write_record([
            r.round.to_string(),
            ts(r.round_start_s),
            ts(r.round_end_s),
            r.mean_val_accuracy.to_string(),
            ids.join(";"),
        ])?;
    }
    w.flush()?;
    Ok(rows.len())
}

/// Writes `samples.csv`, `stage_events.csv` and `rounds.csv` for already
/// loaded records.
pub fn export_records(records: &JobRecords, out_dir: &Path) -> Result<ExportSummary, ExportError> {
    fs::create_dir_all(out_dir)?;
    let samples_csv = out_dir.join("samples.csv");
    let stage_events_csv = out_dir.join("stage_events.csv");
    let rounds_csv = out_dir.join("rounds.csv");
    let samples = write_samples(&samples_csv, &records.samples)?;
    let stage_events = write_stage_events(&stage_events_csv, &records.stage_events)?;
    let rounds = write_rounds(&rounds_csv, &records.rounds)?;
    Ok(ExportSummary {
        samples_csv,
        stage_events_csv,
        rounds_csv,
        samples,
        stage_events,
        rounds,
    })
}

pub fn export_csv(
    store: &MetricStore,
    job_id: &str,
    out_dir: &Path,
) -> Result<ExportSummary, ExportError> {
    let records = store.read_job(job_id)?;
    export_records(&records, out_dir)
}
