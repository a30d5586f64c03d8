//! Client-side emulated clock.
//!
//! A client learns emulated time from the server: every request carries the
//! emulated instant its phase starts, and the client derives download, stage
//! and upload windows from its device profile. Inside those windows wall time
//! maps linearly onto emulated time. Between requests (waiting on the server)
//! the mapping is unknown until the next request arrives, so readings taken
//! there are returned as pending and resolved by interpolation later.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::emulator::Stage;
use crate::metrics::scraper::Stamp;

/// Headroom kept below a window's end so clamped readings stay inside it.
const WINDOW_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Segment {
    Known {
        stage: Stage,
        start_v: f64,
        start_w: Instant,
        end_v: f64,
    },
    Open {
        id: u64,
        start_v: f64,
        start_w: Instant,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Closed {
    start_v: f64,
    start_w: Instant,
    end_v: f64,
    end_w: Instant,
}

#[derive(Debug, Clone)]
pub struct EmulatedClock {
    time_scale: f64,
    current: Segment,
    closed: BTreeMap<u64, Closed>,
    next_id: u64,
}

impl EmulatedClock {
    /// Starts in an open idle segment at emulated zero.
    pub fn new(time_scale: f64, now: Instant) -> Self {
        EmulatedClock {
            time_scale,
            current: Segment::Open {
                id: 0,
                start_v: 0.0,
                start_w: now,
            },
            closed: BTreeMap::new(),
            next_id: 1,
        }
    }

    /// Emulated time at which the client last became free.
    pub fn last_end(&self) -> f64 {
        match self.current {
            Segment::Known { end_v, .. } => end_v,
            Segment::Open { start_v, .. } => start_v,
        }
    }

    pub fn stage(&self) -> Stage {
        match self.current {
            Segment::Known { stage, .. } => stage,
            Segment::Open { .. } => Stage::Idle,
        }
    }

    /// Enters a window `[start_v, end_v)` that begins at wall time `now`.
    /// An open segment is closed at `start_v`.
    pub fn enter(&mut self, stage: Stage, start_v: f64, end_v: f64, now: Instant) {
        if let Segment::Open {
            id,
            start_v: s,
            start_w,
        } = self.current
        {
            self.closed.insert(
                id,
                Closed {
                    start_v: s,
                    start_w,
                    end_v: start_v.max(s),
                    end_w: now,
                },
            );
        }
        self.current = Segment::Known {
            stage,
            start_v,
            start_w: now,
            end_v,
        };
    }

    /// Leaves the current window and waits for the next request.
    pub fn release(&mut self, now: Instant) {
        let start_v = self.last_end();
        self.current = Segment::Open {
            id: self.next_id,
            start_v,
            start_w: now,
        };
        self.next_id += 1;
    }

    pub fn read(&self, now: Instant) -> (Stage, Stamp) {
        match self.current {
            Segment::Known {
                stage,
                start_v,
                start_w,
                end_v,
            } => {
                let t = start_v
                    + now.saturating_duration_since(start_w).as_secs_f64() * self.time_scale;
                let cap = (end_v - WINDOW_EPS).max(start_v);
                (stage, Stamp::At(t.min(cap)))
            }
            Segment::Open { id, .. } => (
                Stage::Idle,
                Stamp::Pending {
                    segment: id,
                    wall: now,
                },
            ),
        }
    }

    pub fn resolve(&self, segment: u64, wall: Instant) -> Option<f64> {
        let c = self.closed.get(&segment)?;
        let span_w = c.end_w.saturating_duration_since(c.start_w).as_secs_f64();
        if span_w <= 0.0 {
            return Some(c.start_v);
        }
        let frac =
            (wall.saturating_duration_since(c.start_w).as_secs_f64() / span_w).clamp(0.0, 1.0);
        Some(c.start_v + frac * (c.end_v - c.start_v))
    }

    /// Closes an open segment by running it at `time_scale` up to `now`.
    pub fn finish(&mut self, now: Instant) {
        if let Segment::Open {
            start_v, start_w, ..
        } = self.current
        {
            let end_v =
                start_v + now.saturating_duration_since(start_w).as_secs_f64() * self.time_scale;
            self.enter(Stage::Idle, end_v, end_v, now);
        }
    }
}
