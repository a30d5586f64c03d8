//! Server-side round policy and aggregation.
//!
//! All aggregation sums run in ascending client-id order with `f64`
//! accumulators, so results do not depend on the order updates arrived in.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelSpec, ParamVector, WidthRatio};

#[derive(Debug, Error, PartialEq)]
pub enum StrategyError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("duplicate update from client {0}")]
    DuplicateClient(u32),
    #[error("client {0} reported no validation accuracy")]
    MissingAccuracy(u32),
    #[error("invalid strategy config: {0}")]
    InvalidConfig(String),
    #[error("round {round}: no update arrived before the {deadline_s} s deadline")]
    DeadlineMissed { round: u32, deadline_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    #[default]
    FedAvg,
    FedProx,
    HeteroFl,
}

impl Algorithm {
    pub fn as_str(&self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::FedProx => "fedprox",
            Algorithm::HeteroFl => "heterofl",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    #[serde(default)]
    pub algorithm: Algorithm,
    #[serde(default = "one")]
    pub fraction_fit: f64,
    pub num_rounds: u32,
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    #[serde(default)]
    pub round_deadline_s: Option<f64>,
    /// Proximal coefficient sent to clients; only used by `fedprox`.
    #[serde(default)]
    pub mu: f64,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl StrategyConfig {
    pub fn validate(&self, num_clients: usize) -> Result<(), StrategyError> {
        let bad = |m: String| Err(StrategyError::InvalidConfig(m));
        if !(self.fraction_fit > 0.0 && self.fraction_fit <= 1.0) {
            return bad(format!(
                "fraction_fit must be in (0, 1], got {}",
                self.fraction_fit
            ));
        }
        if self.num_rounds == 0 {
            return bad("num_rounds must be >= 1".into());
        }
        if let Some(t) = self.target_accuracy {
            if !(t > 0.0 && t <= 1.0) {
                return bad(format!("target_accuracy must be in (0, 1], got {t}"));
            }
        }
        if let Some(d) = self.round_deadline_s {
            if !(d > 0.0 && d.is_finite()) {
                return bad(format!("round_deadline_s must be positive, got {d}"));
            }
        }
        if !(self.mu >= 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if num_clients == 0 || clients_per_round(num_clients, self.fraction_fit) == 0 {
            return bad("at least one client must be sampled per round".into());
        }
        Ok(())
    }

    /// Proximal coefficient clients should train with.
    pub fn client_mu(&self) -> f64 {
        match self.algorithm {
            Algorithm::FedProx => self.mu,
            _ => 0.0,
        }
    }
}

/// One client's trained model for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: u32,
    pub params: ParamVector,
    pub num_examples: u64,
    pub width_ratio: WidthRatio,
    pub train_loss: f64,
    pub val_accuracy: Option<f64>,
}

/// One client's evaluation of the global model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientEval {
    pub client_id: u32,
    pub num_examples: u64,
    pub loss: f64,
    pub accuracy: f64,
}

/// Anything that carries a per-client validation accuracy.
pub trait AccuracyReport {
    fn client_id(&self) -> u32;
    fn num_examples(&self) -> u64;
    fn val_accuracy(&self) -> Option<f64>;
}

impl AccuracyReport for ClientUpdate {
    fn client_id(&self) -> u32 {
        self.client_id
    }
    fn num_examples(&self) -> u64 {
        self.num_examples
    }
    fn val_accuracy(&self) -> Option<f64> {
        self.val_accuracy
    }
}

impl AccuracyReport for ClientEval {
    fn client_id(&self) -> u32 {
        self.client_id
    }
    fn num_examples(&self) -> u64 {
        self.num_examples
    }
    fn val_accuracy(&self) -> Option<f64> {
        Some(self.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u32,
    pub sampled_clients: Vec<u32>,
    /// Clients whose updates made it into the aggregate.
    pub aggregated_clients: Vec<u32>,
    pub round_start_s: f64,
    /// When the last accepted update arrived (or the deadline expired).
    pub fit_end_s: f64,
    pub round_end_s: f64,
    pub mean_val_accuracy: f64,
    /// Emulated fit stage length per sampled client.
    pub fit_durations_s: BTreeMap<u32, f64>,
    pub eval_durations_s: BTreeMap<u32, f64>,
}

/// `ceil(fraction * k)`, tolerant of binary round-off in the product.
pub fn clients_per_round(k: usize, fraction: f64) -> usize {
    ((fraction * k as f64 - 1e-9).ceil().max(0.0) as usize).min(k)
}

/// Uniform sample without replacement of `ceil(fraction * K)` ids, returned
/// in ascending order; depends only on `(seed, round)`.
pub fn sample_clients(all_ids: &[u32], fraction: f64, seed: u64, round: u32) -> Vec<u32> {
    let mut ids = all_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let m = clients_per_round(ids.len(), fraction).max(1).min(ids.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round as u64);
    let mut picked: Vec<u32> = ids.choose_multiple(&mut rng, m).copied().collect();
    picked.sort_unstable();
    picked
}

fn sorted_by_client<U: AccuracyReport>(items: &[U]) -> Result<Vec<&U>, StrategyError> {
    let mut v: Vec<&U> = items.iter().collect();
    v.sort_by_key(|u| u.client_id());
    for w in v.windows(2) {
        if w[0].client_id() == w[1].client_id() {
            return Err(StrategyError::DuplicateClient(w[0].client_id()));
        }
    }
    Ok(v)
}

/// Coordinate-wise `sum(n_k * w_k) / sum(n_k)`.
pub fn aggregate_fedavg(updates: &[ClientUpdate]) -> Result<ParamVector, StrategyError> {
    let ordered = sorted_by_client(updates)?;
    let first = ordered.first().ok_or(StrategyError::Empty)?;
    let shapes = first.params.shapes().to_vec();
    let mut acc = vec![0.0f64; first.params.len()];
    let mut total = 0.0f64;
    for u in &ordered {
        if u.params.shapes() != shapes.as_slice() {
            return Err(StrategyError::ShapeMismatch(format!(
                "client {} sent shapes {:?}, expected {:?}",
                u.client_id,
                u.params.shapes(),
                shapes
            )));
        }
        let n = u.num_examples as f64;
        for (a, &v) in acc.iter_mut().zip(u.params.values()) {
            *a += n * v as f64;
        }
        total += n;
    }
    if total <= 0.0 {
        return Err(StrategyError::Empty);
    }
    acc.iter_mut().for_each(|a| *a /= total);
    Ok(ParamVector::from_f64(&acc, shapes))
}

/// Global coordinate index for every coordinate of the `ratio` submodel.
fn submodel_index(spec: &ModelSpec, ratio: WidthRatio) -> Vec<usize> {
    let full = spec.with_ratio(WidthRatio::FULL).shapes();
    let sub = spec.with_ratio(ratio).shapes();
    let mut index = Vec::with_capacity(sub.iter().map(|s| s.len()).sum());
    let mut offset = 0;
    for (f, s) in full.iter().zip(&sub) {
        for r in 0..s.rows {
            for c in 0..s.cols {
                index.push(offset + r * f.cols + c);
            }
        }
        let bias_off = offset + f.rows * f.cols;
        index.extend(bias_off..bias_off + s.bias);
        offset += f.len();
    }
    index
}

/// Leading `ceil(ratio * width)` units of every hidden layer, with the
/// matching rows and columns of the adjacent weight matrices.
pub fn heterofl_extract(
    global: &ParamVector,
    spec: &ModelSpec,
    ratio: WidthRatio,
) -> Result<ParamVector, StrategyError> {
    let full = spec.with_ratio(WidthRatio::FULL);
    if global.shapes() != full.shapes().as_slice() {
        return Err(StrategyError::ShapeMismatch(format!(
            "global shapes {:?} do not match full-width model {:?}",
            global.shapes(),
            full.shapes()
        )));
    }
    let values = global.values();
    let sub: Vec<f32> = submodel_index(spec, ratio)
        .into_iter()
        .map(|i| values[i])
        .collect();
    Ok(ParamVector::new(sub, spec.with_ratio(ratio).shapes())
        .expect("index map matches submodel shapes"))
}

/// Every global coordinate held by at least one update becomes the
/// `n_k`-weighted mean over the updates holding it; the rest keep their
/// value from `previous_global`.
pub fn heterofl_aggregate(
    updates: &[ClientUpdate],
    previous_global: &ParamVector,
    spec: &ModelSpec,
) -> Result<ParamVector, StrategyError> {
    let ordered = sorted_by_client(updates)?;
    if ordered.is_empty() {
        return Err(StrategyError::Empty);
    }
    let full = spec.with_ratio(WidthRatio::FULL).shapes();
    if previous_global.shapes() != full.as_slice() {
        return Err(StrategyError::ShapeMismatch(format!(
            "previous global shapes {:?} do not match full-width model {:?}",
            previous_global.shapes(),
            full
        )));
    }
    let mut acc = vec![0.0f64; previous_global.len()];
    let mut weight = vec![0.0f64; previous_global.len()];
    let mut index_cache: BTreeMap<WidthRatio, Vec<usize>> = BTreeMap::new();
    for u in &ordered {
        let expected = spec.with_ratio(u.width_ratio).shapes();
        if u.params.shapes() != expected.as_slice() {
            return Err(StrategyError::ShapeMismatch(format!(
                "client {} at ratio {} sent shapes {:?}, expected {:?}",
                u.client_id,
                u.width_ratio,
                u.params.shapes(),
                expected
            )));
        }
        let index = index_cache
            .entry(u.width_ratio)
            .or_insert_with(|| submodel_index(spec, u.width_ratio));
        let n = u.num_examples as f64;
        for (&g, &v) in index.iter().zip(u.params.values()) {
            acc[g] += n * v as f64;
            weight[g] += n;
        }
    }
    let merged: Vec<f64> = acc
        .iter()
        .zip(&weight)
        .zip(previous_global.values())
        .map(|((&a, &w), &prev)| if w > 0.0 { a / w } else { prev as f64 })
        .collect();
    Ok(ParamVector::from_f64(&merged, full))
}

/// Unweighted mean of per-client validation accuracy.
pub fn aggregate_round_metrics<U: AccuracyReport>(reports: &[U]) -> Result<f64, StrategyError> {
    let ordered = sorted_by_client(reports)?;
    if ordered.is_empty() {
        return Err(StrategyError::Empty);
    }
    let mut sum = 0.0;
    for r in &ordered {
        sum += r
            .val_accuracy()
            .ok_or(StrategyError::MissingAccuracy(r.client_id()))?;
    }
    Ok(sum / ordered.len() as f64)
}

/// Example-count weighted mean of per-client validation accuracy.
pub fn weighted_round_metrics<U: AccuracyReport>(reports: &[U]) -> Result<f64, StrategyError> {
    let ordered = sorted_by_client(reports)?;
    let mut sum = 0.0;
    let mut total = 0.0;
    for r in &ordered {
        let acc = r
            .val_accuracy()
            .ok_or(StrategyError::MissingAccuracy(r.client_id()))?;
        sum += r.num_examples() as f64 * acc;
        total += r.num_examples() as f64;
    }
    if total <= 0.0 {
        return Err(StrategyError::Empty);
    }
    Ok(sum / total)
}

/// Splits `(update, arrival time)` pairs into those arriving by
/// `round_start + deadline` and the rest. Without a deadline every update is
/// on time.
pub fn split_on_time<T>(
    arrivals: Vec<(T, f64)>,
    round: u32,
    round_start: f64,
    deadline: Option<f64>,
) -> Result<(Vec<T>, Vec<T>), StrategyError> {
    let Some(d) = deadline else {
        return Ok((arrivals.into_iter().map(|(u, _)| u).collect(), Vec::new()));
    };
    let (on_time, late): (Vec<_>, Vec<_>) = arrivals
        .into_iter()
        .partition(|(_, t)| *t <= round_start + d);
    if on_time.is_empty() {
        return Err(StrategyError::DeadlineMissed {
            round,
            deadline_s: d,
        });
    }
    Ok((
        on_time.into_iter().map(|(u, _)| u).collect(),
        late.into_iter().map(|(u, _)| u).collect(),
    ))
}

pub fn should_stop(history: &[RoundRecord], cfg: &StrategyConfig) -> bool {
    let Some(last) = history.last() else {
        return false;
    };
    if let Some(target) = cfg.target_accuracy {
        if last.mean_val_accuracy >= target {
            return true;
        }
    }
    history.len() >= cfg.num_rounds as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, Activation, LayerShape};

    fn scalar_update(id: u32, v: f32, n: u64) -> ClientUpdate {
        ClientUpdate {
            client_id: id,
            params: ParamVector::new(
                vec![v],
                vec![LayerShape {
                    rows: 1,
                    cols: 1,
                    bias: 0,
                }],
            )
            .unwrap(),
            num_examples: n,
            width_ratio: WidthRatio::FULL,
            train_loss: 0.0,
            val_accuracy: None,
        }
    }

    fn cfg() -> StrategyConfig {
        StrategyConfig {
            algorithm: Algorithm::FedAvg,
            fraction_fit: 1.0,
            num_rounds: 3,
            target_accuracy: None,
            round_deadline_s: None,
            mu: 0.0,
            seed: 0,
        }
    }

    fn record(round: u32, acc: f64) -> RoundRecord {
        RoundRecord {
            round,
            sampled_clients: vec![0],
            aggregated_clients: vec![0],
            round_start_s: 0.0,
            fit_end_s: 0.0,
            round_end_s: 1.0,
            mean_val_accuracy: acc,
            fit_durations_s: BTreeMap::new(),
            eval_durations_s: BTreeMap::new(),
        }
    }

    #[test]
    fn sampling_sizes() {
        let ids: Vec<u32> = (0..10).collect();
        assert_eq!(sample_clients(&ids, 1.0, 3, 0), ids);
        let s = sample_clients(&ids, 0.4, 3, 0);
        assert_eq!(s.len(), 4);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s, sample_clients(&ids, 0.4, 3, 0));
        assert_eq!(sample_clients(&ids, 0.7, 3, 1).len(), 7);
        assert_eq!(sample_clients(&ids, 0.3, 3, 1).len(), 3);
        assert_eq!(sample_clients(&ids, 0.01, 3, 1).len(), 1);
        // different rounds draw different subsets eventually
        let distinct: std::collections::BTreeSet<Vec<u32>> =
            (0..20).map(|r| sample_clients(&ids, 0.4, 3, r)).collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn fedavg_examples() {
        let same = vec![scalar_update(0, 1.5, 3), scalar_update(1, 1.5, 9)];
        assert_eq!(aggregate_fedavg(&same).unwrap().values(), &[1.5]);
        let mid = vec![scalar_update(0, 0.0, 5), scalar_update(1, 2.0, 5)];
        assert_eq!(aggregate_fedavg(&mid).unwrap().values(), &[1.0]);
        let weighted = vec![scalar_update(0, 0.0, 1), scalar_update(1, 4.0, 3)];
        assert_eq!(aggregate_fedavg(&weighted).unwrap().values(), &[3.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert_eq!(aggregate_fedavg(&[]), Err(StrategyError::Empty));
        let mut other = scalar_update(1, 0.0, 1);
        other.params = ParamVector::zeros(vec![LayerShape {
            rows: 1,
            cols: 2,
            bias: 0,
        }]);
        assert!(matches!(
            aggregate_fedavg(&[scalar_update(0, 0.0, 1), other]),
            Err(StrategyError::ShapeMismatch(_))
        ));
        assert_eq!(
            aggregate_fedavg(&[scalar_update(2, 0.0, 1), scalar_update(2, 1.0, 1)]),
            Err(StrategyError::DuplicateClient(2))
        );
    }

    #[test]
    fn extract_shapes_and_identity() {
        let spec = ModelSpec::new(vec![4, 8, 3], Activation::Relu).unwrap();
        let g = init_model(&spec, 1);
        assert_eq!(heterofl_extract(&g, &spec, WidthRatio::FULL).unwrap(), g);
        let half = WidthRatio::new(1, 2).unwrap();
        let sub = heterofl_extract(&g, &spec, half).unwrap();
        assert_eq!(
            sub.shapes(),
            &[
                LayerShape {
                    rows: 4,
                    cols: 4,
                    bias: 4
                },
                LayerShape {
                    rows: 3,
                    cols: 4,
                    bias: 3
                }
            ]
        );
        assert_eq!(sub.len(), 35);
        let twice = heterofl_extract(
            &heterofl_extract(&g, &spec, WidthRatio::FULL).unwrap(),
            &spec,
            half,
        )
        .unwrap();
        assert_eq!(twice, sub);
        // first hidden unit row of layer 0 is the leading row of the global matrix
        assert_eq!(&sub.values()[0..4], &g.values()[0..4]);
        // layer 1 row 0 keeps only the first four of eight columns
        let l1 = 8 * 4 + 8;
        assert_eq!(&sub.values()[20..24], &g.values()[l1..l1 + 4]);
    }

    #[test]
    fn heterofl_reduces_to_fedavg() {
        let spec = ModelSpec::new(vec![3, 5, 2], Activation::Relu).unwrap();
        let updates: Vec<ClientUpdate> = (0..4)
            .map(|i| ClientUpdate {
                client_id: i,
                params: init_model(&spec, 100 + i as u64),
                num_examples: 10 + 7 * i as u64,
                width_ratio: WidthRatio::FULL,
                train_loss: 0.0,
                val_accuracy: None,
            })
            .collect();
        let prev = init_model(&spec, 0);
        assert_eq!(
            heterofl_aggregate(&updates, &prev, &spec).unwrap(),
            aggregate_fedavg(&updates).unwrap()
        );
    }

    #[test]
    fn heterofl_full_coverage_overwrites() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Relu).unwrap();
        let shapes = spec.shapes();
        let ones = ParamVector::new(vec![1.0; spec.num_params()], shapes.clone()).unwrap();
        let zero = ClientUpdate {
            client_id: 0,
            params: ParamVector::zeros(shapes),
            num_examples: 4,
            width_ratio: WidthRatio::FULL,
            train_loss: 0.0,
            val_accuracy: None,
        };
        let out = heterofl_aggregate(&[zero], &ones, &spec).unwrap();
        assert!(out.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn heterofl_mixed_widths_against_holder_sets() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Relu).unwrap();
        let half = WidthRatio::new(1, 2).unwrap();
        let full_update = ClientUpdate {
            client_id: 0,
            params: init_model(&spec, 1),
            num_examples: 5,
            width_ratio: WidthRatio::FULL,
            train_loss: 0.0,
            val_accuracy: None,
        };
        let half_update = ClientUpdate {
            client_id: 1,
            params: init_model(&spec.with_ratio(half), 2),
            num_examples: 5,
            width_ratio: half,
            train_loss: 0.0,
            val_accuracy: None,
        };
        let prev = init_model(&spec, 3);
        let out =
            heterofl_aggregate(&[half_update.clone(), full_update.clone()], &prev, &spec).unwrap();

        // Brute force: enumerate the global coordinates by (layer, row, col) and
        // find which clients hold each one.
        let mut expected = Vec::new();
        let full_vals = full_update.params.values();
        let half_vals = half_update.params.values();
        let (mut fi, mut hi) = (0usize, 0usize);
        // layer 0: 4x2 + 4 ; half: 2x2 + 2
        // layer 1: 2x4 + 2 ; half: 2x2 + 2
        let layers = [(4usize, 2usize, 2usize, 2usize), (2, 4, 2, 2)];
        for (rows, cols, hrows, hcols) in layers {
            for r in 0..rows {
                for c in 0..cols {
                    let f = full_vals[fi] as f64;
                    fi += 1;
                    if r < hrows && c < hcols {
                        expected.push(((f + half_vals[hi] as f64) / 2.0) as f32);
                        hi += 1;
                    } else {
                        expected.push(f as f32);
                    }
                }
            }
            for r in 0..rows {
                let f = full_vals[fi] as f64;
                fi += 1;
                if r < hrows {
                    expected.push(((f + half_vals[hi] as f64) / 2.0) as f32);
                    hi += 1;
                } else {
                    expected.push(f as f32);
                }
            }
        }
        assert_eq!(out.values(), expected.as_slice());
    }

    #[test]
    fn heterofl_uncovered_coordinates_carry_over() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Relu).unwrap();
        let half = WidthRatio::new(1, 2).unwrap();
        let prev = init_model(&spec, 3);
        let u = ClientUpdate {
            client_id: 0,
            params: ParamVector::zeros(spec.with_ratio(half).shapes()),
            num_examples: 1,
            width_ratio: half,
            train_loss: 0.0,
            val_accuracy: None,
        };
        let out = heterofl_aggregate(&[u], &prev, &spec).unwrap();
        let held = submodel_index(&spec, half);
        for (i, (&o, &p)) in out.values().iter().zip(prev.values()).enumerate() {
            if held.contains(&i) {
                assert_eq!(o, 0.0);
            } else {
                assert_eq!(o, p);
            }
        }
    }

    #[test]
    fn heterofl_rejects_wrong_slice() {
        let spec = ModelSpec::new(vec![2, 4, 2], Activation::Relu).unwrap();
        let u = ClientUpdate {
            client_id: 0,
            params: init_model(&spec, 1),
            num_examples: 1,
            width_ratio: WidthRatio::new(1, 2).unwrap(),
            train_loss: 0.0,
            val_accuracy: None,
        };
        assert!(matches!(
            heterofl_aggregate(&[u], &init_model(&spec, 0), &spec),
            Err(StrategyError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn round_metrics() {
        let evals = |accs: &[f64]| -> Vec<ClientEval> {
            accs.iter()
                .enumerate()
                .map(|(i, &a)| ClientEval {
                    client_id: i as u32,
                    num_examples: 1 + i as u64,
                    loss: 0.0,
                    accuracy: a,
                })
                .collect()
        };
        assert!((aggregate_round_metrics(&evals(&[0.5, 0.7])).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(aggregate_round_metrics(&evals(&[0.64])).unwrap(), 0.64);
        let accs: Vec<f64> = (0..20).map(|i| ((i * 37) % 100) as f64 / 100.0).collect();
        let oracle = accs.iter().sum::<f64>() / 20.0;
        assert!((aggregate_round_metrics(&evals(&accs)).unwrap() - oracle).abs() < 1e-12);
        let w = weighted_round_metrics(&evals(&[0.0, 1.0])).unwrap();
        assert!((w - 2.0 / 3.0).abs() < 1e-15);
        let missing = vec![scalar_update(4, 0.0, 1)];
        assert_eq!(
            aggregate_round_metrics(&missing),
            Err(StrategyError::MissingAccuracy(4))
        );
    }

    #[test]
    fn stopping_rule() {
        let mut c = cfg();
        assert!(!should_stop(&[], &c));
        assert!(!should_stop(&[record(0, 0.1), record(1, 0.2)], &c));
        assert!(should_stop(
            &[record(0, 0.1), record(1, 0.2), record(2, 0.3)],
            &c
        ));
        c.target_accuracy = Some(0.64);
        assert!(should_stop(&[record(0, 0.64)], &c));
        assert!(!should_stop(&[record(0, 0.6399)], &c));
    }

    #[test]
    fn deadline_split() {
        let arrivals = vec![("a", 1.0), ("b", 3.0), ("c", 2.0)];
        let (on, late) = split_on_time(arrivals.clone(), 0, 0.5, Some(2.0)).unwrap();
        assert_eq!(on, vec!["a", "c"]);
        assert_eq!(late, vec!["b"]);
        let (on, late) = split_on_time(arrivals.clone(), 0, 0.5, None).unwrap();
        assert_eq!(on.len(), 3);
        assert!(late.is_empty());
        assert!(matches!(
            split_on_time(arrivals, 4, 10.0, Some(-9.5)),
            Err(StrategyError::DeadlineMissed { round: 4, .. })
        ));
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        assert!(c.validate(10).is_ok());
        c.fraction_fit = 0.0;
        assert!(c.validate(10).is_err());
        c.fraction_fit = 1.0;
        c.num_rounds = 0;
        assert!(c.validate(10).is_err());
        assert_eq!(cfg().client_mu(), 0.0);
        let prox = StrategyConfig {
            algorithm: Algorithm::FedProx,
            mu: 0.01,
            ..cfg()
        };
        assert_eq!(prox.client_mu(), 0.01);
    }
}
