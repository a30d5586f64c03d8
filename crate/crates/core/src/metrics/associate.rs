//! Assigning samples to the stage windows they fall in.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use super::records::{Edge, MetricSample, StageEvent, StageKind};
use crate::strategy::RoundRecord;

/// A stage interval `[start_s, end_s)` of one client.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageWindow {
    pub client_id: u32,
    pub round: u32,
    pub kind: StageKind,
    pub start_s: f64,
    pub end_s: f64,
}

impl StageWindow {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn contains(&self, ts: f64) -> bool {
        self.start_s <= ts && ts < self.end_s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Bucket {
    Stage {
        round: u32,
        kind: StageKind,
    },
    /// Outside every stage; `round` is the server round whose window holds
    /// the sample, if any.
    Idle {
        round: Option<u32>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unpaired {
    pub client_id: u32,
    pub round: u32,
    pub kind: StageKind,
    pub starts: usize,
    pub ends: usize,
    pub reversed: bool,
}

impl fmt::Display for Unpaired {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "client {} round {} {}: {} start, {} end",
            self.client_id,
            self.round,
            self.kind.as_str(),
            self.starts,
            self.ends
        )?;
        if self.reversed {
            write!(f, " (end precedes start)")?;
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
#[error("{} unpaired stage event group(s): {}", .0.len(), .0.iter().map(|u| u.to_string()).collect::<Vec<_>>().join("; "))]
pub struct AssociateError(pub Vec<Unpaired>);

/// Pairs start/end events per `(client, round, kind)`. Output is ordered by
/// client, round, then kind.
pub fn stage_windows(events: &[StageEvent]) -> Result<Vec<StageWindow>, AssociateError> {
    type Key = (u32, u32, StageKind);
    let mut groups: BTreeMap<Key, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for e in events {
        let g = groups.entry((e.client_id, e.round, e.kind)).or_default();
        match e.edge {
            Edge::Start => g.0.push(e.ts_s),
            Edge::End => g.1.push(e.ts_s),
        }
    }
    let mut windows = Vec::with_capacity(groups.len());
    let mut bad = Vec::new();
    for ((client_id, round, kind), (starts, ends)) in groups {
        let reversed = starts.len() == 1 && ends.len() == 1 && ends[0] < starts[0];
        if starts.len() != 1 || ends.len() != 1 || reversed {
            bad.push(Unpaired {
                client_id,
                round,
                kind,
                starts: starts.len(),
                ends: ends.len(),
                reversed,
            });
            continue;
        }
        windows.push(StageWindow {
            client_id,
            round,
            kind,
            start_s: starts[0],
            end_s: ends[0],
        });
    }
    if bad.is_empty() {
        Ok(windows)
    } else {
        Err(AssociateError(bad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    pub windows: Vec<StageWindow>,
    /// One bucket per input sample, same order.
    pub buckets: Vec<Bucket>,
}

impl Association {
    /// Sample indices per bucket.
    pub fn groups(&self) -> BTreeMap<Bucket, Vec<usize>> {
        let mut out: BTreeMap<Bucket, Vec<usize>> = BTreeMap::new();
        for (i, b) in self.buckets.iter().enumerate() {
            out.entry(*b).or_default().push(i);
        }
        out
    }
}

/// Tags each sample with the stage window of its client containing its
/// timestamp, or idle. Windows are half-open; if two windows of a client
/// overlap, the later-starting one wins.
pub fn associate_rounds(
    samples: &[MetricSample],
    events: &[StageEvent],
    rounds: &[RoundRecord],
) -> Result<Association, AssociateError> {
    let windows = stage_windows(events)?;
    let mut per_client: BTreeMap<u32, Vec<StageWindow>> = BTreeMap::new();
    for w in &windows {
        per_client.entry(w.client_id).or_default().push(*w);
    }
    for ws in per_client.values_mut() {
        ws.sort_by(|a, b| a.start_s.total_cmp(&b.start_s));
    }
    let mut round_spans: Vec<(f64, f64, u32)> = rounds
        .iter()
        .map(|r| (r.round_start_s, r.round_end_s, r.round))
        .collect();
    round_spans.sort_by(|a, b| a.0.total_cmp(&b.0));

    let buckets = samples
        .iter()
        .map(|s| {
            let hit = per_client.get(&s.client_id).and_then(|ws| {
                let upto = ws.partition_point(|w| w.start_s <= s.ts_s);
                ws[..upto].iter().rev().find(|w| w.contains(s.ts_s))
            });
            match hit {
                Some(w) => Bucket::Stage {
                    round: w.round,
                    kind: w.kind,
                },
                None => {
                    let upto = round_spans.partition_point(|r| r.0 <= s.ts_s);
                    let round = round_spans[..upto]
                        .iter()
                        .rev()
                        .find(|r| s.ts_s < r.1)
                        .map(|r| r.2);
                    Bucket::Idle { round }
                }
            }
        })
        .collect();
    Ok(Association { windows, buckets })
}
