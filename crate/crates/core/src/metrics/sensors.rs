//! Sensor sources for a client process.

use std::fs;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::scraper::{Reading, Sensors};
use crate::clock::EmulatedClock;
use crate::emulator::{power_sample, DeviceProfile};

/// Cumulative socket byte counters shared with the network code.
#[derive(Debug, Default)]
pub struct NetCounters {
    up: AtomicU64,
    down: AtomicU64,
}

impl NetCounters {
    pub fn add_up(&self, n: u64) {
        self.up.fetch_add(n, Ordering::Relaxed);
    }

    pub fn add_down(&self, n: u64) {
        self.down.fetch_add(n, Ordering::Relaxed);
    }

    pub fn up(&self) -> u64 {
        self.up.load(Ordering::Relaxed)
    }

    pub fn down(&self) -> u64 {
        self.down.load(Ordering::Relaxed)
    }
}

/// CPU% and resident memory of the current process from `/proc/self`.
/// Reports zeros where procfs is unavailable.
#[derive(Debug)]
pub struct ProcSampler {
    ticks_per_s: f64,
    page_bytes: u64,
    last: Option<(Instant, u64)>,
}

impl Default for ProcSampler {
    fn default() -> Self {
        Self::new()
    }
}

impl ProcSampler {
    pub fn new() -> Self {
        // SAFETY: sysconf has no preconditions.
        let (ticks, page) = unsafe {
            (
                libc::sysconf(libc::_SC_CLK_TCK),
                libc::sysconf(libc::_SC_PAGESIZE),
            )
        };
        ProcSampler {
            ticks_per_s: if ticks > 0 { ticks as f64 } else { 100.0 },
            page_bytes: if page > 0 { page as u64 } else { 4096 },
            last: None,
        }
    }

    pub fn available() -> bool {
        fs::metadata("/proc/self/stat").is_ok()
    }

    fn cpu_ticks() -> Option<u64> {
        let stat = fs::read_to_string("/proc/self/stat").ok()?;
        // the command name may contain spaces; fields resume after ')'
        let rest = &stat[stat.rfind(')')? + 2..];
        let fields: Vec<&str> = rest.split_whitespace().collect();
        let utime: u64 = fields.get(11)?.parse().ok()?;
        let stime: u64 = fields.get(12)?.parse().ok()?;
        Some(utime + stime)
    }

    fn rss_bytes(&self) -> Option<u64> {
        let statm = fs::read_to_string("/proc/self/statm").ok()?;
        let pages: u64 = statm.split_whitespace().nth(1)?.parse().ok()?;
        Some(pages * self.page_bytes)
    }

    /// CPU% since the previous call (0 on the first) and RSS in bytes.
    pub fn sample(&mut self) -> (f32, u64) {
        let now = Instant::now();
        let cpu = match (Self::cpu_ticks(), self.last) {
            (Some(t), Some((then, prev))) => {
                let wall = now.duration_since(then).as_secs_f64();
                self.last = Some((now, t));
                if wall > 0.0 {
                    (t.saturating_sub(prev) as f64 / self.ticks_per_s / wall * 100.0) as f32
                } else {
                    0.0
                }
            }
            (Some(t), None) => {
                self.last = Some((now, t));
                0.0
            }
            (None, _) => 0.0,
        };
        (cpu, self.rss_bytes().unwrap_or(0))
    }
}

/// Emulated device: power from the current stage, timestamps from the
/// client's emulated clock.
pub struct DeviceSensors {
    clock: Arc<Mutex<EmulatedClock>>,
    profile: DeviceProfile,
    rng: ChaCha8Rng,
    proc: ProcSampler,
    net: Arc<NetCounters>,
}

impl DeviceSensors {
    pub fn new(
        clock: Arc<Mutex<EmulatedClock>>,
        profile: DeviceProfile,
        seed: u64,
        net: Arc<NetCounters>,
    ) -> Self {
        DeviceSensors {
            clock,
            profile,
            rng: ChaCha8Rng::seed_from_u64(seed),
            proc: ProcSampler::new(),
            net,
        }
    }
}

impl Sensors for DeviceSensors {
    fn read(&mut self) -> Reading {
        let (stage, stamp) = self.clock.lock().unwrap().read(Instant::now());
        let (cpu_percent, mem_bytes) = self.proc.sample();
        Reading {
            stamp,
            cpu_percent,
            mem_bytes,
            power_w: power_sample(&self.profile, stage, &mut self.rng),
            net_up_bytes: self.net.up(),
            net_down_bytes: self.net.down(),
        }
    }

    fn resolve(&self, segment: u64, wall: Instant) -> Option<f64> {
        self.clock.lock().unwrap().resolve(segment, wall)
    }

    fn finish(&mut self) {
        self.clock.lock().unwrap().finish(Instant::now());
    }
}
