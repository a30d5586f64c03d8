//! Emulated edge-device profiles.
//!
//! A profile turns work (samples trained, bytes moved) into emulated seconds
//! and stage state into a synthetic power reading. Emulated seconds are what
//! metrics record; `time_scale` only compresses the wall-clock sleeps that
//! make co-located processes behave like slower hardware.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Repo-shipped profiles. Only the XavierNX idle draw (2.9 W) and its
/// 5 W training draw are measured values; everything else is synthetic and
/// loosely ordered fastest (AGX Orin) to slowest (Jetson Nano).
pub const DEFAULT_PROFILES_YAML: &str = include_str!("../profiles.yaml");

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile {name}: {reason}")]
    Invalid { name: String, reason: String },
    #[error("unknown device type {0:?}")]
    UnknownDevice(String),
    #[error("cannot parse profiles: {0}")]
    Parse(#[from] serde_yaml::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Idle,
    Fit,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Uplink,
    Downlink,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceProfile {
    #[serde(default)]
    pub name: String,
    /// Training throughput in samples per emulated second.
    pub samples_per_second: f64,
    pub idle_power_w: f64,
    /// Extra draw while a fit or eval stage is running.
    pub active_power_delta_w: f64,
    pub uplink_bps: f64,
    pub downlink_bps: f64,
    #[serde(default)]
    pub power_noise_sigma_w: f64,
    /// Emulated seconds per wall-clock second.
    #[serde(default = "unit")]
    pub time_scale: f64,
    /// Cost of evaluating one sample relative to training on it.
    #[serde(default = "default_eval_cost")]
    pub eval_cost_ratio: f64,
}

fn unit() -> f64 {
    1.0
}

fn default_eval_cost() -> f64 {
    1.0 / 3.0
}

impl DeviceProfile {
    pub fn validate(&self) -> Result<(), ProfileError> {
        let bad = |reason: String| {
            Err(ProfileError::Invalid {
                name: self.name.clone(),
                reason,
            })
        };
        let positive = [
            ("samples_per_second", self.samples_per_second),
            ("uplink_bps", self.uplink_bps),
            ("downlink_bps", self.downlink_bps),
            ("time_scale", self.time_scale),
            ("eval_cost_ratio", self.eval_cost_ratio),
        ];
        for (field, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{field} must be finite and > 0, got {v}"));
            }
        }
        let non_negative = [
            ("idle_power_w", self.idle_power_w),
            ("active_power_delta_w", self.active_power_delta_w),
            ("power_noise_sigma_w", self.power_noise_sigma_w),
        ];
        for (field, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{field} must be finite and >= 0, got {v}"));
            }
        }
        Ok(())
    }

    /// Mean draw for a stage, before noise.
    pub fn stage_power(&self, stage: Stage) -> f64 {
        match stage {
            Stage::Idle => self.idle_power_w,
            Stage::Fit | Stage::Eval => self.idle_power_w + self.active_power_delta_w,
        }
    }
}

/// Profiles keyed by device type.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ProfileSet {
    profiles: BTreeMap<String, DeviceProfile>,
}

impl ProfileSet {
    pub fn builtin() -> Self {
        ProfileSet::from_yaml(DEFAULT_PROFILES_YAML).expect("shipped profiles are valid")
    }

    pub fn from_yaml(text: &str) -> Result<Self, ProfileError> {
        let raw: BTreeMap<String, DeviceProfile> = serde_yaml::from_str(text)?;
        let mut profiles = BTreeMap::new();
        for (name, mut p) in raw {
            p.name = name.clone();
            p.validate()?;
            profiles.insert(name, p);
        }
        Ok(ProfileSet { profiles })
    }

    pub fn load(path: &Path) -> Result<Self, ProfileError> {
        ProfileSet::from_yaml(&fs::read_to_string(path)?)
    }

    pub fn get(&self, dev_type: &str) -> Result<&DeviceProfile, ProfileError> {
        self.profiles
            .get(dev_type)
            .ok_or_else(|| ProfileError::UnknownDevice(dev_type.to_string()))
    }

    pub fn insert(&mut self, profile: DeviceProfile) -> Result<(), ProfileError> {
        profile.validate()?;
        self.profiles.insert(profile.name.clone(), profile);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = &DeviceProfile> {
        self.profiles.values()
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&self.profiles).expect("profiles serialize")
    }
}

/// `epochs * num_samples / samples_per_second`.
pub fn emulated_fit_duration(profile: &DeviceProfile, num_samples: u64, epochs: u64) -> f64 {
    epochs as f64 * num_samples as f64 / profile.samples_per_second
}

/// One forward pass over `num_samples`.
pub fn emulated_eval_duration(profile: &DeviceProfile, num_samples: u64) -> f64 {
    num_samples as f64 * profile.eval_cost_ratio / profile.samples_per_second
}

/// `8 * payload_bytes / bps` for the given direction.
pub fn emulated_tx_duration(
    profile: &DeviceProfile,
    payload_bytes: u64,
    direction: Direction,
) -> f64 {
    let bps = match direction {
        Direction::Uplink => profile.uplink_bps,
        Direction::Downlink => profile.downlink_bps,
    };
    8.0 * payload_bytes as f64 / bps
}

/// Wall-clock seconds still to wait so a stage that already took
/// `real_elapsed` wall seconds lasts `emulated / time_scale` overall.
pub fn throttle_delay(real_elapsed: f64, emulated: f64, time_scale: f64) -> f64 {
    (emulated / time_scale - real_elapsed).max(0.0)
}

/// Sleeps for [`throttle_delay`] and returns the time slept.
pub fn throttle(real_elapsed: Duration, emulated: f64, time_scale: f64) -> Duration {
    let delay = Duration::from_secs_f64(throttle_delay(
        real_elapsed.as_secs_f64(),
        emulated,
        time_scale,
    ));
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    delay
}

/// Stage mean plus `N(0, sigma)`, clamped at zero.
pub fn power_sample<R: Rng + ?Sized>(profile: &DeviceProfile, stage: Stage, rng: &mut R) -> f64 {
    let mean = profile.stage_power(stage);
    if profile.power_noise_sigma_w == 0.0 {
        return mean;
    }
    let noise = Normal::new(0.0, profile.power_noise_sigma_w).expect("validated sigma");
    (mean + noise.sample(rng)).max(0.0)
}

#[cfg(test)]
mod tests {
    use std::time::Instant;

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn profile() -> DeviceProfile {
        DeviceProfile {
            name: "test".into(),
            samples_per_second: 100.0,
            idle_power_w: 2.9,
            active_power_delta_w: 2.1,
            uplink_bps: 8e6,
            downlink_bps: 16e6,
            power_noise_sigma_w: 0.0,
            time_scale: 10.0,
            eval_cost_ratio: 0.5,
        }
    }

    #[test]
    fn builtin_profiles_load() {
        let set = ProfileSet::builtin();
        for name in [
            "JetsonNano",
            "JetsonXavierNX",
            "JetsonOrinNano",
            "JetsonAGXOrin",
            "LattePandaDelta3",
            "OrangePi5B",
        ] {
            assert!(set.get(name).is_ok(), "{name}");
        }
        assert_eq!(set.get("JetsonXavierNX").unwrap().idle_power_w, 2.9);
        assert!(matches!(
            set.get("Pixel7"),
            Err(ProfileError::UnknownDevice(_))
        ));
        let fastest = set.get("JetsonAGXOrin").unwrap().samples_per_second;
        assert!(set.iter().all(|p| p.samples_per_second <= fastest));
        let slowest = set.get("JetsonNano").unwrap().samples_per_second;
        assert!(set.iter().all(|p| p.samples_per_second >= slowest));
    }

    #[test]
    fn profiles_file_rejects_bad_values() {
        let text = "X:\n  samples_per_second: 1\n  idle_power_w: 1\n  active_power_delta_w: 1\n  uplink_bps: .inf\n  downlink_bps: 1\n";
        assert!(matches!(
            ProfileSet::from_yaml(text),
            Err(ProfileError::Invalid { .. })
        ));
        let text = "X:\n  samples_per_second: 1\n  idle_power_w: 1\n  active_power_delta_w: 1\n  uplink_bps: 1\n  downlink_bps: 1\n  turbo: true\n";
        assert!(matches!(
            ProfileSet::from_yaml(text),
            Err(ProfileError::Parse(_))
        ));
    }

    #[test]
    fn fit_duration() {
        let p = profile();
        assert_eq!(emulated_fit_duration(&p, 200, 1), 2.0);
        assert_eq!(emulated_fit_duration(&p, 200, 2), 4.0);
        assert!(emulated_fit_duration(&p, 201, 1) > emulated_fit_duration(&p, 200, 1));
        assert_eq!(emulated_eval_duration(&p, 200), 1.0);
    }

    #[test]
    fn tx_duration() {
        let p = profile();
        assert_eq!(emulated_tx_duration(&p, 1_000_000, Direction::Uplink), 1.0);
        assert_eq!(
            emulated_tx_duration(&p, 1_000_000, Direction::Downlink),
            0.5
        );
        let slow = DeviceProfile {
            uplink_bps: p.uplink_bps / 3.2,
            ..p.clone()
        };
        let ratio = emulated_tx_duration(&slow, 4096, Direction::Uplink)
            / emulated_tx_duration(&p, 4096, Direction::Uplink);
        assert!((ratio - 3.2).abs() < 1e-12);
    }

    #[test]
    fn throttle_arithmetic() {
        assert!((throttle_delay(0.05, 2.0, 10.0) - 0.15).abs() < 1e-12);
        assert_eq!(throttle_delay(1.0, 2.0, 10.0), 0.0);
        let t = Instant::now();
        let slept = throttle(Duration::from_millis(10), 0.5, 10.0);
        assert!((slept.as_secs_f64() - 0.04).abs() < 1e-9);
        assert!(t.elapsed() >= slept);
    }

    #[test]
    fn noiseless_power() {
        let p = profile();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(power_sample(&p, Stage::Idle, &mut rng), 2.9);
        assert_eq!(power_sample(&p, Stage::Fit, &mut rng), 5.0);
        assert_eq!(power_sample(&p, Stage::Eval, &mut rng), 5.0);
    }

    #[test]
    fn noisy_power_mean() {
        let p = DeviceProfile {
            power_noise_sigma_w: 0.1,
            ..profile()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| power_sample(&p, Stage::Fit, &mut rng))
            .sum::<f64>()
            / n as f64;
        assert!((mean - 5.0).abs() < 0.01, "{mean}");
        let mut a = ChaCha8Rng::seed_from_u64(1);
        let mut b = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(
            power_sample(&p, Stage::Idle, &mut a),
            power_sample(&p, Stage::Idle, &mut b)
        );
    }

    #[test]
    fn noise_never_negative() {
        let p = DeviceProfile {
            idle_power_w: 0.0,
            power_noise_sigma_w: 5.0,
            ..profile()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!((0..1000).all(|_| power_sample(&p, Stage::Idle, &mut rng) >= 0.0));
    }
}
