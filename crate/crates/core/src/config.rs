//! Experiment configuration files.
//!
//! ```yaml
//! code:
//!   client:
//!     entrypoint: "colext-client"
//!     args:
//!       - "--server_addr=${COLEXT_SERVER_ADDRESS}"
//!       - "--client_id=${COLEXT_CLIENT_ID}"
//!   server:
//!     entrypoint: "colext-server"
//!     args: "--n_clients=${COLEXT_N_CLIENTS} --n_rounds=3"
//! devices:
//!   - { dev_type: LattePandaDelta3, count: 4 }
//! monitoring:
//!   scrapping_interval: 0.3
//!   push_to_db_interval: 10
//! ```
//!
//! `strategy`, `model`, `data`, `training` and `emulation` sections are
//! optional; see the field docs for defaults. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::emulator::{DeviceProfile, ProfileError, ProfileSet};
use crate::model::{Activation, ModelSpec, TrainConfig, WidthRatio};
use crate::partition::{BlobParams, PartitionPlan, Skew};
use crate::strategy::{Algorithm, StrategyConfig};

pub const ENV_SERVER_ADDRESS: &str = "COLEXT_SERVER_ADDRESS";
pub const ENV_N_CLIENTS: &str = "COLEXT_N_CLIENTS";
pub const ENV_CLIENT_ID: &str = "COLEXT_CLIENT_ID";
pub const ENV_CLIENT_DEV_TYPE: &str = "COLEXT_CLIENT_DEV_TYPE";

/// Entrypoint names that run this binary's own server and client.
pub const BUILTIN_SERVER: &str = "colext-server";
pub const BUILTIN_CLIENT: &str = "colext-client";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: String,
        #[source]
        source: serde_yaml::Error,
    },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown placeholder ${{{0}}}")]
    UnknownPlaceholder(String),
    #[error("unterminated placeholder in {0:?}")]
    Unterminated(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Arguments as a YAML list or a single whitespace-separated string.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Args {
    List(Vec<String>),
    Line(String),
}

impl Default for Args {
    fn default() -> Self {
        Args::List(Vec::new())
    }
}

impl Args {
    pub fn to_vec(&self) -> Vec<String> {
        match self {
            Args::List(v) => v.clone(),
            Args::Line(s) => s.split_whitespace().map(str::to_string).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entrypoint {
    pub entrypoint: String,
    #[serde(default)]
    pub args: Args,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeSection {
    pub client: Entrypoint,
    pub server: Entrypoint,
}

impl Default for CodeSection {
    fn default() -> Self {
        CodeSection {
            client: Entrypoint {
                entrypoint: BUILTIN_CLIENT.into(),
                args: Args::List(vec![
                    format!("--server_addr=${{{ENV_SERVER_ADDRESS}}}"),
                    format!("--client_id=${{{ENV_CLIENT_ID}}}"),
                ]),
            },
            server: Entrypoint {
                entrypoint: BUILTIN_SERVER.into(),
                args: Args::Line(format!("--n_clients=${{{ENV_N_CLIENTS}}}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceGroup {
    pub dev_type: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monitoring {
    /// Emulated seconds between metric samples.
    pub scrapping_interval: f64,
    /// Emulated seconds between batched pushes to the store.
    pub push_to_db_interval: f64,
}

/// Parameter counts of the canonical `small` and `large` models.
pub const SMALL_MODEL_PARAMS: usize = 35_000;
pub const LARGE_MODEL_PARAMS: usize = 380_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NamedSize {
    Small,
    Large,
}

/// A one-hidden-layer MLP sized by parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSize {
    Named(NamedSize),
    Params(usize),
}

impl ModelSize {
    pub fn target_params(&self) -> usize {
        match self {
            ModelSize::Named(NamedSize::Small) => SMALL_MODEL_PARAMS,
            ModelSize::Named(NamedSize::Large) => LARGE_MODEL_PARAMS,
            ModelSize::Params(n) => *n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Label for summaries; derived from the layout when absent.
    #[serde(default)]
    pub name: Option<String>,
    /// Hidden layer widths; empty means softmax regression.
    #[serde(default)]
    pub hidden: Vec<usize>,
    /// Alternative to `hidden`.
    #[serde(default)]
    pub size: Option<ModelSize>,
    #[serde(default)]
    pub activation: Activation,
    /// HeteroFL submodel width per device type.
    #[serde(default)]
    pub width_ratios: BTreeMap<String, WidthRatio>,
    #[serde(default)]
    pub init_seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            name: None,
            hidden: Vec::new(),
            size: None,
            activation: Activation::Relu,
            width_ratios: BTreeMap::new(),
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub num_classes: usize,
    pub dim: usize,
    /// Average train plus validation samples per client.
    pub samples_per_client: usize,
    pub val_fraction: f64,
    pub skew: Skew,
    pub min_per_client: usize,
    pub seed: u64,
    pub center_scale: f64,
    pub sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        let blobs = BlobParams::default();
        DataSection {
            num_classes: 3,
            dim: 16,
            samples_per_client: 250,
            val_fraction: 0.2,
            skew: Skew::Dirichlet { alpha: 1.0 },
            min_per_client: 10,
            seed: 0,
            center_scale: blobs.center_scale,
            sigma: blobs.sigma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            local_epochs: 1,
            batch_size: 16,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulationSection {
    pub time_scale: f64,
    /// Extra profiles file, relative to the config file; entries override
    /// the shipped ones.
    pub profiles_file: Option<PathBuf>,
    /// Overrides every profile's power noise when set.
    pub power_noise_sigma_w: Option<f64>,
}

impl Default for EmulationSection {
    fn default() -> Self {
        EmulationSection {
            time_scale: 10.0,
            profiles_file: None,
            power_noise_sigma_w: None,
        }
    }
}

fn default_strategy() -> StrategyConfig {
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

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub code: CodeSection,
    pub devices: Vec<DeviceGroup>,
    pub monitoring: Monitoring,
    #[serde(default = "default_strategy")]
    pub strategy: StrategyConfig,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub emulation: EmulationSection,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RosterEntry {
    pub client_id: u32,
    pub dev_type: String,
}

impl ExperimentConfig {
    pub fn from_yaml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        serde_yaml::from_str(text).map_err(|source| ConfigError::Parse {
            path: origin.to_string(),
            source,
        })
    }

    pub fn n_clients(&self) -> u32 {
        self.devices.iter().map(|d| d.count).sum()
    }

    /// Client ids assigned in devices-list order.
    pub fn roster(&self) -> Vec<RosterEntry> {
        let mut out = Vec::new();
        for d in &self.devices {
            for _ in 0..d.count {
                out.push(RosterEntry {
                    client_id: out.len() as u32,
                    dev_type: d.dev_type.clone(),
                });
            }
        }
        out
    }

    pub fn model_spec(&self) -> Result<ModelSpec, ConfigError> {
        if let Some(size) = self.model.size {
            if !self.model.hidden.is_empty() {
                return Err(invalid(
                    "model.size",
                    "cannot be combined with model.hidden",
                ));
            }
            return ModelSpec::mlp_with_params(
                self.data.dim,
                self.data.num_classes,
                size.target_params(),
                self.model.activation,
            )
            .map_err(|e| invalid("model.size", e.to_string()));
        }
        let mut widths = vec![self.data.dim];
        widths.extend(&self.model.hidden);
        widths.push(self.data.num_classes);
        ModelSpec::new(widths, self.model.activation).map_err(|e| invalid("model", e.to_string()))
    }

    pub fn model_name(&self) -> String {
        match &self.model.name {
            Some(n) => n.clone(),
            None if self.model.size == Some(ModelSize::Named(NamedSize::Small)) => "small".into(),
            None if self.model.size == Some(ModelSize::Named(NamedSize::Large)) => "large".into(),
            None if self.model.size.is_some() => match self.model_spec() {
                Ok(spec) => format!("mlp-{}", spec.layer_widths[1]),
                Err(_) => "mlp".into(),
            },
            None if self.model.hidden.is_empty() => "softmax".into(),
            None => {
                let h: Vec<String> = self.model.hidden.iter().map(usize::to_string).collect();
                format!("mlp-{}", h.join("x"))
            }
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            local_epochs: self.training.local_epochs,
            batch_size: self.training.batch_size,
            learning_rate: self.training.learning_rate,
            mu: self.strategy.client_mu(),
            seed: self.strategy.seed,
        }
    }

    pub fn partition_plan(&self) -> PartitionPlan {
        PartitionPlan {
            num_clients: self.n_clients() as usize,
            skew: self.data.skew,
            seed: self.data.seed,
            val_fraction: self.data.val_fraction,
            min_per_client: self.data.min_per_client,
        }
    }

    /// Shipped profiles, overlaid with `emulation.profiles_file`, with the
    /// emulation time scale and noise override applied.
    pub fn profiles(&self, config_dir: &Path) -> Result<ProfileSet, ConfigError> {
        let mut set = ProfileSet::builtin();
        if let Some(file) = &self.emulation.profiles_file {
            let extra = ProfileSet::load(&config_dir.join(file))?;
            for p in extra.iter() {
                set.insert(p.clone())?;
            }
        }
        let mut out = ProfileSet::default();
        for p in set.iter() {
            let mut p: DeviceProfile = p.clone();
            p.time_scale = self.emulation.time_scale;
            if let Some(sigma) = self.emulation.power_noise_sigma_w {
                p.power_noise_sigma_w = sigma;
            }
            out.insert(p)?;
        }
        Ok(out)
    }

    pub fn validate(&self, profiles: &ProfileSet) -> Result<(), ConfigError> {
        if self.devices.is_empty() {
            return Err(invalid("devices", "at least one device group is required"));
        }
        for (i, d) in self.devices.iter().enumerate() {
            if d.count == 0 {
                return Err(invalid(format!("devices[{i}].count"), "must be >= 1"));
            }
            if profiles.get(&d.dev_type).is_err() {
                return Err(invalid(
                    format!("devices[{i}].dev_type"),
                    format!("unknown device type {:?}", d.dev_type),
                ));
            }
        }
        let positive = |field: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be > 0, got {v}")))
            }
        };
        positive(
            "monitoring.scrapping_interval",
            self.monitoring.scrapping_interval,
        )?;
        positive(
            "monitoring.push_to_db_interval",
            self.monitoring.push_to_db_interval,
        )?;
        positive("emulation.time_scale", self.emulation.time_scale)?;
        if let Some(s) = self.emulation.power_noise_sigma_w {
            if !(s.is_finite() && s >= 0.0) {
                return Err(invalid(
                    "emulation.power_noise_sigma_w",
                    format!("must be >= 0, got {s}"),
                ));
            }
        }
        for (field, e) in [
            ("code.client", &self.code.client),
            ("code.server", &self.code.server),
        ] {
            if e.entrypoint.trim().is_empty() {
                return Err(invalid(format!("{field}.entrypoint"), "must not be empty"));
            }
        }
        self.strategy
            .validate(self.n_clients() as usize)
            .map_err(|e| invalid("strategy", e.to_string()))?;
        self.model_spec()?;
        for dev in self.model.width_ratios.keys() {
            if !self.devices.iter().any(|d| &d.dev_type == dev) {
                return Err(invalid(
                    format!("model.width_ratios.{dev}"),
                    "device type not in devices list",
                ));
            }
        }
        self.train_config()
            .validate()
            .map_err(|e| invalid("training", e.to_string()))?;
        let d = &self.data;
        if d.num_classes < 2 || d.dim == 0 || d.samples_per_client == 0 {
            return Err(invalid(
                "data",
                "need num_classes >= 2, dim >= 1, samples_per_client >= 1",
            ));
        }
        if !(d.val_fraction > 0.0 && d.val_fraction < 1.0) {
            return Err(invalid("data.val_fraction", "must be in (0, 1)"));
        }
        positive("data.center_scale", d.center_scale)?;
        positive("data.sigma", d.sigma)?;
        self.partition_plan()
            .validate()
            .map_err(|e| invalid("data", e.to_string()))?;
        Ok(())
    }
}

/// A parsed and validated config file.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: PathBuf,
    pub dir: PathBuf,
    pub profiles: ProfileSet,
}

pub fn parse_config(path: &Path) -> Result<LoadedConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let config = ExperimentConfig::from_yaml(&text, &path.display().to_string())?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let profiles = config.profiles(&dir)?;
    config.validate(&profiles)?;
    Ok(LoadedConfig {
        config,
        path: path.to_path_buf(),
        dir,
        profiles,
    })
}

/// Replaces every `${NAME}` in `args` from `env`.
pub fn substitute_env(
    args: &[String],
    env: &BTreeMap<String, String>,
) -> Result<Vec<String>, ConfigError> {
    args.iter()
        .map(|arg| {
            let mut out = String::with_capacity(arg.len());
            let mut rest = arg.as_str();
            while let Some(i) = rest.find("${") {
                out.push_str(&rest[..i]);
                let after = &rest[i + 2..];
                let end = after
                    .find('}')
                    .ok_or_else(|| ConfigError::Unterminated(arg.clone()))?;
                let name = &after[..end];
                let value = env
                    .get(name)
                    .ok_or_else(|| ConfigError::UnknownPlaceholder(name.to_string()))?;
                out.push_str(value);
                rest = &after[end + 1..];
            }
            out.push_str(rest);
            Ok(out)
        })
        .collect()
}
