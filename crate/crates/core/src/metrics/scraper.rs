//! Background metric scraper.
//!
//! Ticks on a fixed-rate schedule (`next = start + k * interval`, so a slow
//! tick does not shift later ones), buffers samples, and flushes the buffer to
//! a [`MetricSink`] every push interval and once more on shutdown. Intervals
//! are in emulated seconds and divided by `time_scale` for wall-clock waits.
//!
//! Samples whose emulated timestamp is not yet known (see
//! [`crate::clock::EmulatedClock`]) stay buffered until the sensors can
//! resolve them, so flushes never reorder a client's samples.

use std::collections::VecDeque;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::records::{MetricSample, Record, StageEvent, ENCODED_SAMPLE_LEN};
use super::store::MetricSink;

#[derive(Debug, Error)]
pub enum ScraperError {
    #[error("invalid scraper config: {0}")]
    Config(String),
    #[error("sink rejected the final flush; {unflushed} records not stored: {source}")]
    Sink {
        unflushed: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("scraper thread panicked")]
    Panicked,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScraperConfig {
    pub scrape_interval_s: f64,
    /// `None` keeps everything buffered until shutdown.
    pub push_interval_s: Option<f64>,
    pub time_scale: f64,
    /// Oldest buffered records are dropped beyond this many.
    pub max_buffered: usize,
    /// Record the buffer size in bytes after every tick.
    pub trace_buffer: bool,
}

impl ScraperConfig {
    pub fn new(scrape_interval_s: f64, push_interval_s: f64, time_scale: f64) -> Self {
        ScraperConfig {
            scrape_interval_s,
            push_interval_s: Some(push_interval_s),
            time_scale,
            max_buffered: 1_000_000,
            trace_buffer: false,
        }
    }

    fn validate(&self) -> Result<(), ScraperError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.scrape_interval_s) {
            return Err(ScraperError::Config("scrape interval must be > 0".into()));
        }
        if self.push_interval_s.is_some_and(|p| !positive(p)) {
            return Err(ScraperError::Config("push interval must be > 0".into()));
        }
        if !positive(self.time_scale) {
            return Err(ScraperError::Config("time scale must be > 0".into()));
        }
        if self.max_buffered == 0 {
            return Err(ScraperError::Config("max_buffered must be >= 1".into()));
        }
        Ok(())
    }
}

/// Emulated timestamp of a reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Stamp {
    At(f64),
    /// Taken inside an open clock segment; resolved once it closes.
    Pending {
        segment: u64,
        wall: Instant,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reading {
    pub stamp: Stamp,
    pub cpu_percent: f32,
    pub mem_bytes: u64,
    pub power_w: f64,
    pub net_up_bytes: u64,
    pub net_down_bytes: u64,
}

pub trait Sensors: Send {
    fn read(&mut self) -> Reading;

    fn resolve(&self, _segment: u64, _wall: Instant) -> Option<f64> {
        None
    }

    /// Called once before the final flush; every pending stamp must be
    /// resolvable afterwards.
    fn finish(&mut self) {}
}

pub enum ScraperControl {
    Stage(StageEvent),
    Stop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Flush {
    /// Emulated seconds since the scraper started.
    pub at_s: f64,
    pub samples: usize,
    pub records: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScraperStats {
    pub samples_taken: usize,
    pub samples_pushed: usize,
    pub records_pushed: usize,
    pub dropped: usize,
    pub push_failures: usize,
    pub flushes: Vec<Flush>,
    pub buffer_trace: Vec<usize>,
}

enum Buffered {
    Ready(Record),
    Pending(Reading, u64, Instant),
}

impl Buffered {
    fn encoded_len(&self) -> usize {
        match self {
            Buffered::Ready(r) => r.encoded_len(),
            Buffered::Pending(..) => ENCODED_SAMPLE_LEN,
        }
    }
}

fn to_sample(r: &Reading, ts_s: f64, client_id: u32) -> MetricSample {
    MetricSample {
        ts_s,
        client_id,
        cpu_percent: r.cpu_percent,
        mem_bytes: r.mem_bytes,
        power_w: r.power_w,
        net_up_bytes: r.net_up_bytes,
        net_down_bytes: r.net_down_bytes,
    }
}

struct Scraper<S, K> {
    cfg: ScraperConfig,
    sensors: S,
    sink: K,
    client_id: u32,
    buffer: VecDeque<Buffered>,
    buffer_bytes: usize,
    stats: ScraperStats,
    start: Instant,
}

impl<S: Sensors, K: MetricSink> Scraper<S, K> {
    fn enqueue(&mut self, item: Buffered) {
        self.buffer_bytes += item.encoded_len();
        self.buffer.push_back(item);
        while self.buffer.len() > self.cfg.max_buffered {
            let old = self.buffer.pop_front().unwrap();
            self.buffer_bytes -= old.encoded_len();
            self.stats.dropped += 1;
        }
    }

    fn tick(&mut self) {
        let reading = self.sensors.read();
        self.stats.samples_taken += 1;
        let item = match reading.stamp {
            Stamp::At(ts) => {
                Buffered::Ready(Record::Sample(to_sample(&reading, ts, self.client_id)))
            }
            Stamp::Pending { segment, wall } => Buffered::Pending(reading, segment, wall),
        };
        self.enqueue(item);
        if self.cfg.trace_buffer {
            self.stats.buffer_trace.push(self.buffer_bytes);
        }
    }

    /// Pushes the resolvable prefix of the buffer.
    fn flush(&mut self) -> std::io::Result<()> {
        let mut batch = Vec::new();
        let mut taken = 0;
        for item in &self.buffer {
            match item {
                Buffered::Ready(r) => batch.push(r.clone()),
                Buffered::Pending(reading, seg, wall) => match self.sensors.resolve(*seg, *wall) {
                    Some(ts) => batch.push(Record::Sample(to_sample(reading, ts, self.client_id))),
                    None => break,
                },
            }
            taken += 1;
        }
        if batch.is_empty() {
            return Ok(());
        }
        if let Err(e) = self.sink.push(&batch) {
            self.stats.push_failures += 1;
            return Err(e);
        }
        let samples = batch
            .iter()
            .filter(|r| matches!(r, Record::Sample(_)))
            .count();
        for _ in 0..taken {
            let item = self.buffer.pop_front().unwrap();
            self.buffer_bytes -= item.encoded_len();
        }
        self.stats.samples_pushed += samples;
        self.stats.records_pushed += batch.len();
        self.stats.flushes.push(Flush {
            at_s: self.start.elapsed().as_secs_f64() * self.cfg.time_scale,
            samples,
            records: batch.len(),
        });
        Ok(())
    }

    fn run(mut self, control: Receiver<ScraperControl>) -> Result<ScraperStats, ScraperError> {
        let period = Duration::from_secs_f64(self.cfg.scrape_interval_s / self.cfg.time_scale);
        let push_period = self
            .cfg
            .push_interval_s
            .map(|p| Duration::from_secs_f64(p / self.cfg.time_scale));
        let (mut ticks, mut pushes) = (0u32, 1u32);
        let mut next_tick = self.start;
        let mut next_push = push_period.map(|p| self.start + p);
        loop {
            let now = Instant::now();
            while now >= next_tick {
                self.tick();
                ticks += 1;
                next_tick = self.start + period * ticks;
            }
            if let (Some(due), Some(p)) = (next_push, push_period) {
                if now >= due {
                    // failures leave the batch buffered for the next attempt
                    if let Err(e) = self.flush() {
                        log::warn!("metric push failed, will retry: {e}");
                    }
                    pushes += 1;
                    next_push = Some(self.start + p * pushes);
                }
            }
            let wake = next_push.map_or(next_tick, |p| p.min(next_tick));
            match control.recv_timeout(wake.saturating_duration_since(Instant::now())) {
                Ok(ScraperControl::Stage(ev)) => self.enqueue(Buffered::Ready(Record::Stage(ev))),
                Ok(ScraperControl::Stop) | Err(RecvTimeoutError::Disconnected) => break,
                Err(RecvTimeoutError::Timeout) => {}
            }
        }
        // stage events sent just before Stop are still queued
        while let Ok(ScraperControl::Stage(ev)) = control.try_recv() {
            self.enqueue(Buffered::Ready(Record::Stage(ev)));
        }
        self.sensors.finish();
        let mut last_err = None;
        for attempt in 0..3 {
            match self.flush() {
                Ok(()) if self.buffer.is_empty() => return Ok(self.stats),
                Ok(()) => break,
                Err(e) => {
                    last_err = Some(e);
                    thread::sleep(Duration::from_millis(20 << attempt));
                }
            }
        }
        Err(ScraperError::Sink {
            unflushed: self.buffer.len(),
            source: last_err
                .unwrap_or_else(|| std::io::Error::other("unresolved sample timestamps")),
        })
    }
}

/// Runs the scraper on the current thread until `Stop` arrives or the control
/// channel closes.
pub fn scraper_loop<S: Sensors, K: MetricSink>(
    cfg: ScraperConfig,
    sensors: S,
    sink: K,
    client_id: u32,
    control: Receiver<ScraperControl>,
) -> Result<ScraperStats, ScraperError> {
    cfg.validate()?;
    Scraper {
        cfg,
        sensors,
        sink,
        client_id,
        buffer: VecDeque::new(),
        buffer_bytes: 0,
        stats: ScraperStats::default(),
        start: Instant::now(),
    }
    .run(control)
}

/// A scraper running on its own thread.
pub struct ScraperHandle {
    tx: Sender<ScraperControl>,
    join: JoinHandle<Result<ScraperStats, ScraperError>>,
}

impl ScraperHandle {
    pub fn spawn<S, K>(
        cfg: ScraperConfig,
        sensors: S,
        sink: K,
        client_id: u32,
    ) -> Result<Self, ScraperError>
    where
        S: Sensors + 'static,
        K: MetricSink + 'static,
    {
        cfg.validate()?;
        let (tx, rx) = mpsc::channel();
        let join = thread::Builder::new()
            .name(format!("scraper-{client_id}"))
            .spawn(move || scraper_loop(cfg, sensors, sink, client_id, rx))
            .expect("spawn scraper thread");
        Ok(ScraperHandle { tx, join })
    }

    /// Forwards a stage marker to the sink with the next flush.
    pub fn stage(&self, ev: StageEvent) {
        let _ = self.tx.send(ScraperControl::Stage(ev));
    }

    pub fn sender(&self) -> Sender<ScraperControl> {
        self.tx.clone()
    }

    pub fn stop(self) -> Result<ScraperStats, ScraperError> {
        let _ = self.tx.send(ScraperControl::Stop);
        self.join.join().map_err(|_| ScraperError::Panicked)?
    }
}

/// Sensors with a linear emulated clock and constant readings.
pub struct ConstantSensors {
    start: Instant,
    time_scale: f64,
    pub power_w: f64,
}

impl ConstantSensors {
    pub fn new(time_scale: f64, power_w: f64) -> Self {
        ConstantSensors {
            start: Instant::now(),
            time_scale,
            power_w,
        }
    }
}

impl Sensors for ConstantSensors {
    fn read(&mut self) -> Reading {
        Reading {
            stamp: Stamp::At(self.start.elapsed().as_secs_f64() * self.time_scale),
            cpu_percent: 0.0,
            mem_bytes: 0,
            power_w: self.power_w,
            net_up_bytes: 0,
            net_down_bytes: 0,
        }
    }
}
