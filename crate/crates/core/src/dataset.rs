//! In-memory classification datasets and the flat on-disk shard format.
//!
//! Shard layout (all little-endian): `n: u32, d: u32, C: u32`, then `n * d`
//! `f32` features row-major, then `n` `u16` labels.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("malformed dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f32>,
    labels: Vec<u16>,
    dim: usize,
    num_classes: usize,
}

impl Dataset {
    pub fn new(
        features: Vec<f32>,
        labels: Vec<u16>,
        dim: usize,
        num_classes: usize,
    ) -> Result<Self, DatasetError> {
        if labels.is_empty() {
            return Err(DatasetError::Invalid(
                "dataset needs at least one sample".into(),
            ));
        }
        if dim == 0 || features.len() != labels.len() * dim {
            return Err(DatasetError::Invalid(format!(
                "{} features cannot form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes > u16::MAX as usize + 1 {
            return Err(DatasetError::Invalid(format!(
                "bad class count {num_classes}"
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(DatasetError::Invalid(format!(
                "label {l} >= class count {num_classes}"
            )));
        }
        Ok(Dataset {
            features,
            labels,
            dim,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn features(&self) -> &[f32] {
        &self.features
    }

    pub fn sample(&self, i: usize) -> (&[f32], u16) {
        (
            &self.features[i * self.dim..(i + 1) * self.dim],
            self.labels[i],
        )
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset, DatasetError> {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (x, y) = self.sample(i);
            features.extend_from_slice(x);
            labels.push(y);
        }
        Dataset::new(features, labels, self.dim, self.num_classes)
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.features.len() + 2 * self.labels.len());
        for v in [self.len(), self.dim, self.num_classes] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for f in &self.features {
            out.extend_from_slice(&f.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self, DatasetError> {
        if buf.len() < 12 {
            return Err(DatasetError::Format("header truncated".into()));
        }
        let word =
            |i: usize| u32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (n, d, c) = (word(0), word(1), word(2));
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_mul(4))
            .and_then(|f| f.checked_add(2 * n + 12))
            .ok_or_else(|| DatasetError::Format("size overflow".into()))?;
        if buf.len() != expected {
            return Err(DatasetError::Format(format!(
                "expected {expected} bytes for n={n} d={d}, found {}",
                buf.len()
            )));
        }
        let feat_end = 12 + 4 * n * d;
        let features = buf[12..feat_end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let labels = buf[feat_end..]
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Dataset::new(features, labels, d, c)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        Dataset::from_bytes(&fs::read(path)?)
    }
}
