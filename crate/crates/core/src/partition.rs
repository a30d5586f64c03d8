//! Synthetic data generation and client partitioning.
//!
//! Non-IID splits use per-class label skew: for every class a proportion
//! vector over the clients is drawn from `Dirichlet(alpha, ..., alpha)` and the
//! class's samples are dealt out with largest-remainder rounding so the counts
//! are exact. Clients left below the minimum size take one sample at a time
//! from the currently largest client.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};

#[derive(Debug, Error)]
pub enum PartitionError {
    #[error("invalid partition plan: {0}")]
    InvalidPlan(String),
    #[error("cannot give each of {clients} clients {min} samples from {samples} samples")]
    TooFewSamples {
        clients: usize,
        min: usize,
        samples: usize,
    },
    #[error("split of {n} samples with fraction {fraction} leaves an empty side")]
    EmptySplit { n: usize, fraction: f64 },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Gaussian blob generator settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobParams {
    /// Standard deviation of each coordinate of the class centers.
    pub center_scale: f64,
    /// Standard deviation of samples around their center.
    pub sigma: f64,
}

impl Default for BlobParams {
    fn default() -> Self {
        BlobParams {
            center_scale: 1.0,
            sigma: 1.0,
        }
    }
}

/// `per_class` samples for each of `num_classes` Gaussian blobs in `dim`
/// dimensions, using the default [`BlobParams`].
pub fn synth_dataset(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    seed: u64,
) -> Result<Dataset, PartitionError> {
    synth_blobs(num_classes, dim, per_class, seed, BlobParams::default())
}

pub fn synth_blobs(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    seed: u64,
    params: BlobParams,
) -> Result<Dataset, PartitionError> {
    if num_classes == 0 || dim == 0 || per_class == 0 {
        return Err(PartitionError::InvalidPlan(
            "class count, dimension and per-class size must be positive".into(),
        ));
    }
    if !(params.center_scale >= 0.0 && params.sigma >= 0.0) {
        return Err(PartitionError::InvalidPlan(
            "blob scales must be non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center_dist = Normal::new(0.0, params.center_scale).unwrap();
    let noise = Normal::new(0.0, params.sigma).unwrap();
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| (0..dim).map(|_| center_dist.sample(&mut rng)).collect())
        .collect();
    let n = num_classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    // round-robin over classes so any prefix is roughly balanced
    for _ in 0..per_class {
        for (c, center) in centers.iter().enumerate() {
            features.extend(center.iter().map(|m| (m + noise.sample(&mut rng)) as f32));
            labels.push(c as u16);
        }
    }
    Ok(Dataset::new(features, labels, dim, num_classes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Skew {
    Iid,
    Dirichlet { alpha: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub num_clients: usize,
    pub skew: Skew,
    pub seed: u64,
    pub val_fraction: f64,
    /// Smallest allowed shard; at least 2 when a validation split follows.
    #[serde(default = "default_min_per_client")]
    pub min_per_client: usize,
}

fn default_min_per_client() -> usize {
    2
}

impl PartitionPlan {
    pub fn validate(&self) -> Result<(), PartitionError> {
        if self.num_clients == 0 {
            return Err(PartitionError::InvalidPlan(
                "num_clients must be >= 1".into(),
            ));
        }
        if let Skew::Dirichlet { alpha } = self.skew {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(PartitionError::InvalidPlan(format!(
                    "alpha must be > 0, got {alpha}"
                )));
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(PartitionError::InvalidPlan(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if self.min_per_client == 0 {
            return Err(PartitionError::InvalidPlan(
                "min_per_client must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Index sets (into `data`) for each client.
pub fn partition_indices(
    data: &Dataset,
    plan: &PartitionPlan,
) -> Result<Vec<Vec<usize>>, PartitionError> {
    plan.validate()?;
    let k = plan.num_clients;
    if data.len() < k * plan.min_per_client {
        return Err(PartitionError::TooFewSamples {
            clients: k,
            min: plan.min_per_client,
            samples: data.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); k];
    match plan.skew {
        Skew::Iid => {
            let mut all: Vec<usize> = (0..data.len()).collect();
            all.shuffle(&mut rng);
            for (i, idx) in all.into_iter().enumerate() {
                shards[i % k].push(idx);
            }
        }
        Skew::Dirichlet { alpha } => {
            let gamma =
                Gamma::new(alpha, 1.0).map_err(|e| PartitionError::InvalidPlan(e.to_string()))?;
            for class in 0..data.num_classes() {
                let mut members: Vec<usize> = data
                    .labels()
                    .iter()
                    .enumerate()
                    .filter(|(_, &l)| l as usize == class)
                    .map(|(i, _)| i)
                    .collect();
                if members.is_empty() {
                    continue;
                }
                members.shuffle(&mut rng);
                let mut props: Vec<f64> = (0..k).map(|_| gamma.sample(&mut rng)).collect();
                let total: f64 = props.iter().sum();
                if total > 0.0 && total.is_finite() {
                    props.iter_mut().for_each(|p| *p /= total);
                } else {
                    props = vec![1.0 / k as f64; k];
                }
                let counts = largest_remainder(&props, members.len());
                let mut start = 0;
                for (shard, c) in shards.iter_mut().zip(counts) {
                    shard.extend_from_slice(&members[start..start + c]);
                    start += c;
                }
            }
        }
    }
    rebalance(&mut shards, plan.min_per_client);
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

/// Splits `data` over `plan.num_clients` clients.
pub fn dirichlet_partition(
    data: &Dataset,
    plan: &PartitionPlan,
) -> Result<Vec<Dataset>, PartitionError> {
    partition_indices(data, plan)?
        .iter()
        .map(|idx| data.subset(idx).map_err(PartitionError::from))
        .collect()
}

/// Integer counts summing to `total`, proportional to `props`.
fn largest_remainder(props: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = props.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..props.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn rebalance(shards: &mut [Vec<usize>], min: usize) {
    loop {
        let Some(needy) = shards.iter().position(|s| s.len() < min) else {
            return;
        };
        let donor = (0..shards.len())
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .unwrap();
        let moved = shards[donor].pop().expect("caller checked total size");
        shards[needy].push(moved);
    }
}

/// Seeded disjoint split; the validation side gets `round(n * val_fraction)` samples.
pub fn train_val_split(
    data: &Dataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(Dataset, Dataset), PartitionError> {
    let n = data.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if !(val_fraction > 0.0 && val_fraction < 1.0) || n_val == 0 || n_val >= n {
        return Err(PartitionError::EmptySplit {
            n,
            fraction: val_fraction,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (val, train) = idx.split_at_mut(n_val);
    val.sort_unstable();
    train.sort_unstable();
    Ok((data.subset(train)?, data.subset(val)?))
}
