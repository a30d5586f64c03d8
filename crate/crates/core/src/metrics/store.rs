//! Append-only metric store.
//!
//! Each job owns a directory; every writer (one per client process plus the
//! server) appends to its own segment file under `metrics/`, so concurrent
//! processes never share a file. Readers merge segments in name order.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::Duration;

use thiserror::Error;

use super::records::{MetricSample, Record, RecordError, StageEvent};
use crate::strategy::RoundRecord;

const SEGMENT_EXT: &str = "seg";
const PUSH_ATTEMPTS: u32 = 3;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("job {0:?} already exists")]
    JobExists(String),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("invalid name {0:?}")]
    BadName(String),
    #[error("segment {path}: {source}")]
    Corrupt {
        path: PathBuf,
        #[source]
        source: RecordError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct MetricStore {
    root: PathBuf,
}

/// Everything recorded for one job, segments merged in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct JobRecords {
    pub samples: Vec<MetricSample>,
    pub stage_events: Vec<StageEvent>,
    pub rounds: Vec<RoundRecord>,
}

fn check_name(name: &str) -> Result<(), StoreError> {
    let ok = !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(StoreError::BadName(name.to_string()))
    }
}

impl MetricStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(MetricStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn job_dir(&self, job_id: &str) -> PathBuf {
        self.root.join(job_id)
    }

    pub fn job_exists(&self, job_id: &str) -> bool {
        check_name(job_id).is_ok() && self.job_dir(job_id).join("metrics").is_dir()
    }

    /// Registers a new job; fails if the id is taken.
    pub fn create_job(&self, job_id: &str) -> Result<PathBuf, StoreError> {
        check_name(job_id)?;
        let dir = self.job_dir(job_id);
        match fs::create_dir(&dir) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                return Err(StoreError::JobExists(job_id.to_string()))
            }
            Err(e) => return Err(e.into()),
        }
        fs::create_dir(dir.join("metrics"))?;
        Ok(dir)
    }

    /// Opens (creating if needed) the segment `name` of `job_id` for appending.
    pub fn segment(&self, job_id: &str, name: &str) -> Result<SegmentWriter, StoreError> {
        check_name(name)?;
        if !self.job_exists(job_id) {
            return Err(StoreError::UnknownJob(job_id.to_string()));
        }
        let path = self
            .job_dir(job_id)
            .join("metrics")
            .join(format!("{name}.{SEGMENT_EXT}"));
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(SegmentWriter { file, path })
    }

    pub fn read_job(&self, job_id: &str) -> Result<JobRecords, StoreError> {
        if !self.job_exists(job_id) {
            return Err(StoreError::UnknownJob(job_id.to_string()));
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(self.job_dir(job_id).join("metrics"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == SEGMENT_EXT))
            .collect();
        paths.sort();
        let mut out = JobRecords::default();
        for path in paths {
            let bytes = fs::read(&path)?;
            let records = Record::decode_all(&bytes).map_err(|source| StoreError::Corrupt {
                path: path.clone(),
                source,
            })?;
            for r in records {
                match r {
                    Record::Sample(s) => out.samples.push(s),
                    Record::Stage(e) => out.stage_events.push(e),
                    Record::Round(r) => out.rounds.push(r),
                }
            }
        }
        Ok(out)
    }
}

/// Appender for one segment file.
#[derive(Debug)]
pub struct SegmentWriter {
    file: File,
    path: PathBuf,
}

impl SegmentWriter {
    pub fn path(&self) -> &Path {
        &self.path
    }

    fn append(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.file.write_all(bytes)?;
        self.file.sync_data()
    }
}

/// Destination for batches of records.
pub trait MetricSink: Send {
    fn push(&mut self, batch: &[Record]) -> io::Result<()>;
}

impl MetricSink for SegmentWriter {
    fn push(&mut self, batch: &[Record]) -> io::Result<()> {
        push_batch(batch, self).map(|_| ())
    }
}

/// In-memory sink, mostly for tests.
#[derive(Debug, Default, Clone)]
pub struct VecSink {
    pub batches: Vec<Vec<Record>>,
}

impl MetricSink for VecSink {
    fn push(&mut self, batch: &[Record]) -> io::Result<()> {
        self.batches.push(batch.to_vec());
        Ok(())
    }
}

/// Durably appends `batch` as one write, retrying transient failures.
/// Returns the number of records written; an empty batch writes nothing.
pub fn push_batch(batch: &[Record], segment: &mut SegmentWriter) -> io::Result<usize> {
    if batch.is_empty() {
        return Ok(0);
    }
    let mut bytes = Vec::with_capacity(batch.iter().map(Record::encoded_len).sum());
    for r in batch {
        r.encode_into(&mut bytes);
    }
    let mut attempt = 0;
    loop {
        match segment.append(&bytes) {
            Ok(()) => return Ok(batch.len()),
            Err(e) if attempt + 1 < PUSH_ATTEMPTS && e.kind() == io::ErrorKind::Interrupted => {
                attempt += 1;
                thread::sleep(Duration::from_millis(10 << attempt));
            }
            Err(e) => return Err(e),
        }
    }
}
