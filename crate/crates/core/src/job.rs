//! A job's on-disk description and the built-in server and client programs.
//!
//! Layout under the store root:
//!
//! ```text
//! <job_id>/experiment.json      resolved config, roster and profiles
//! <job_id>/job.json             supervisor state
//! <job_id>/shards/client-NNNN-{train,val}.bin
//! <job_id>/metrics/*.seg        telemetry segments
//! <job_id>/logs/*.log           process output
//! <job_id>/final_params.bin     global model after the last round
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, LoadedConfig, RosterEntry};
use crate::dataset::{Dataset, DatasetError};
use crate::emulator::DeviceProfile;
use crate::metrics::store::{MetricSink, MetricStore, StoreError};
use crate::model::ParamVector;
use crate::partition::{
    dirichlet_partition, synth_blobs, train_val_split, BlobParams, PartitionError,
};
use crate::protocol::client::{client_run, ClientConfig, ClientError, ClientSummary, Telemetry};
use crate::protocol::server::{Server, ServerConfig, ServerError, ServerOutcome};

pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const FINAL_PARAMS_FILE: &str = "final_params.bin";

#[derive(Debug, Error)]
pub enum JobError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Partition(#[from] PartitionError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Everything a spawned process needs to know about its job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub job_id: String,
    pub store_root: PathBuf,
    pub config: ExperimentConfig,
    pub roster: Vec<RosterEntry>,
    pub profiles: BTreeMap<String, DeviceProfile>,
}

impl JobSpec {
    pub fn new(job_id: &str, store_root: &Path, loaded: &LoadedConfig) -> Result<Self, JobError> {
        let roster = loaded.config.roster();
        let mut profiles = BTreeMap::new();
        for r in &roster {
            let p = loaded
                .profiles
                .get(&r.dev_type)
                .map_err(ConfigError::from)?;
            profiles.insert(r.dev_type.clone(), p.clone());
        }
        Ok(JobSpec {
            job_id: job_id.to_string(),
            store_root: store_root.to_path_buf(),
            config: loaded.config.clone(),
            roster,
            profiles,
        })
    }

    pub fn job_dir(&self) -> PathBuf {
        self.store_root.join(&self.job_id)
    }

    pub fn shard_paths(&self, client_id: u32) -> (PathBuf, PathBuf) {
        let dir = self.job_dir().join("shards");
        (
            dir.join(format!("client-{client_id:04}-train.bin")),
            dir.join(format!("client-{client_id:04}-val.bin")),
        )
    }

    pub fn dev_type(&self, client_id: u32) -> Option<&str> {
        self.roster
            .iter()
            .find(|r| r.client_id == client_id)
            .map(|r| r.dev_type.as_str())
    }

    pub fn profile_for(&self, dev_type: &str) -> Result<&DeviceProfile, JobError> {
        self.profiles
            .get(dev_type)
            .ok_or_else(|| JobError::Invalid(format!("no profile for device type {dev_type:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<(), JobError> {
        let text = serde_json::to_string_pretty(self).map_err(|source| JobError::Json {
            path: path.to_path_buf(),
            source,
        })?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, JobError> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|source| JobError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

/// Generates the blob dataset, partitions it over the roster and writes
/// one train and one validation shard per client. Returns `(train, val)`
/// sizes per client.
pub fn materialize_data(spec: &JobSpec) -> Result<Vec<(usize, usize)>, JobError> {
    let cfg = &spec.config;
    let d = &cfg.data;
    let n_clients = cfg.n_clients() as usize;
    let per_class = (d.samples_per_client * n_clients).div_ceil(d.num_classes);
    let params = BlobParams {
        center_scale: d.center_scale,
        sigma: d.sigma,
    };
    let data = synth_blobs(d.num_classes, d.dim, per_class, d.seed, params)?;
    let shards = dirichlet_partition(&data, &cfg.partition_plan())?;
    fs::create_dir_all(spec.job_dir().join("shards"))?;
    let mut sizes = Vec::with_capacity(n_clients);
    for (id, shard) in shards.iter().enumerate() {
        let (train, val) = train_val_split(shard, d.val_fraction, d.seed.wrapping_add(id as u64))?;
        let (tp, vp) = spec.shard_paths(id as u32);
        train.save(&tp)?;
        val.save(&vp)?;
        sizes.push((train.len(), val.len()));
    }
    Ok(sizes)
}

/// Runs the federated server for a job, writing round records to the
/// job's `server` segment and the final model beside the metrics.
pub fn run_server(
    spec: &JobSpec,
    listen_addr: &str,
    n_clients: Option<u32>,
    n_rounds: Option<u32>,
) -> Result<ServerOutcome, JobError> {
    let cfg = &spec.config;
    let mut strategy = cfg.strategy.clone();
    if let Some(r) = n_rounds {
        strategy.num_rounds = r;
    }
    let server_cfg = ServerConfig {
        n_clients: n_clients.unwrap_or_else(|| cfg.n_clients()),
        strategy,
        spec: cfg.model_spec()?,
        train: cfg.train_config(),
        width_ratios: cfg.model.width_ratios.clone(),
        init_seed: cfg.model.init_seed,
        io_timeout: Duration::from_secs(600),
    };
    let store = MetricStore::open(&spec.store_root)?;
    let mut segment = store.segment(&spec.job_id, "server")?;
    let server = Server::bind(listen_addr, server_cfg)?;
    let outcome = server.run(Some(&mut segment as &mut dyn MetricSink))?;
    fs::write(
        spec.job_dir().join(FINAL_PARAMS_FILE),
        outcome.final_params.encode(),
    )?;
    Ok(outcome)
}

pub fn load_final_params(job_dir: &Path) -> Result<ParamVector, JobError> {
    let bytes = fs::read(job_dir.join(FINAL_PARAMS_FILE))?;
    let (p, _) = ParamVector::decode(&bytes).map_err(|e| JobError::Invalid(e.to_string()))?;
    Ok(p)
}

/// Runs one built-in client for a job.
pub fn run_client(
    spec: &JobSpec,
    server_addr: &str,
    client_id: u32,
    dev_type: Option<&str>,
) -> Result<ClientSummary, JobError> {
    let dev_type = match dev_type {
        Some(d) => d.to_string(),
        None => spec
            .dev_type(client_id)
            .ok_or_else(|| JobError::Invalid(format!("client id {client_id} not in roster")))?
            .to_string(),
    };
    let profile = spec.profile_for(&dev_type)?.clone();
    let (tp, vp) = spec.shard_paths(client_id);
    let cfg = &spec.config;
    let client_cfg = ClientConfig {
        server_addr: server_addr.to_string(),
        client_id,
        dev_type,
        profile,
        activation: cfg.model.activation,
        train: Dataset::load(&tp)?,
        val: Dataset::load(&vp)?,
        telemetry: Some(Telemetry {
            store: MetricStore::open(&spec.store_root)?,
            job_id: spec.job_id.clone(),
            scrape_interval_s: cfg.monitoring.scrapping_interval,
            push_interval_s: cfg.monitoring.push_to_db_interval,
            seed: cfg.data.seed ^ (0x5EED_0000 + client_id as u64),
        }),
        connect_attempts: 40,
        connect_backoff: Duration::from_millis(25),
    };
    Ok(client_run(client_cfg)?)
}
