//! Launching, supervising and inspecting jobs on the local host.
//!
//! One server and one process per client are spawned with the
//! `COLEXT_*` environment contract. Any process exiting non-zero fails the
//! job and every remaining process is killed.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{
    analyze_job, write_summary_csv, write_summary_json, ActiveStages, IdleSource, SummaryRow,
};
use crate::config::{
    parse_config, substitute_env, ConfigError, Entrypoint, BUILTIN_CLIENT, BUILTIN_SERVER,
    ENV_CLIENT_DEV_TYPE, ENV_CLIENT_ID, ENV_N_CLIENTS, ENV_SERVER_ADDRESS,
};
use crate::job::{materialize_data, JobError, JobSpec, EXPERIMENT_FILE};
use crate::metrics::export::{export_records, ExportError, ExportSummary};
use crate::metrics::store::{MetricStore, StoreError};

pub const JOB_FILE: &str = "job.json";
const ENV_PREFIX: &str = "COLEXT_";
const SHUTDOWN_GRACE: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Job(#[from] JobError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    Analysis(#[from] crate::analysis::AnalysisError),
    #[error("unknown job {0:?}")]
    UnknownJob(String),
    #[error("job {0} is still running")]
    StillRunning(String),
    #[error("cannot start {name}: {source}")]
    Spawn {
        name: String,
        #[source]
        source: std::io::Error,
    },
    #[error("job {job_id} failed: {reason}")]
    Failed { job_id: String, reason: String },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl OrchestratorError {
    /// Whether the error comes from bad user input rather than a runtime
    /// failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            OrchestratorError::Config(_)
                | OrchestratorError::Job(JobError::Config(_))
                | OrchestratorError::UnknownJob(_)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JobState {
    Created,
    Running,
    Finished,
    Failed,
}

impl JobState {
    pub fn as_str(&self) -> &'static str {
        match self {
            JobState::Created => "created",
            JobState::Running => "running",
            JobState::Finished => "finished",
            JobState::Failed => "failed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Server,
    Client,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcState {
    Running,
    Exited,
    Killed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub name: String,
    pub role: Role,
    pub client_id: Option<u32>,
    pub dev_type: Option<String>,
    pub program: String,
    pub args: Vec<String>,
    /// The `COLEXT_*` variables the process was started with.
    pub env: BTreeMap<String, String>,
    pub pid: Option<u32>,
    pub state: ProcState,
    pub exit_code: Option<i32>,
    pub log: PathBuf,
}

/// Contents of `job.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub job_id: String,
    pub config_path: PathBuf,
    pub created_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub state: JobState,
    pub supervisor_pid: u32,
    pub server_address: String,
    pub processes: Vec<ProcessRecord>,
    pub error: Option<String>,
}

impl JobRecord {
    fn save(&self, job_dir: &Path) -> Result<(), OrchestratorError> {
        let path = job_dir.join(JOB_FILE);
        let tmp = job_dir.join(format!("{JOB_FILE}.tmp"));
        let text =
            serde_json::to_string_pretty(self).map_err(|source| OrchestratorError::Json {
                path: path.clone(),
                source,
            })?;
        fs::write(&tmp, text)?;
        fs::rename(&tmp, &path)?;
        Ok(())
    }

    pub fn load(job_dir: &Path) -> Result<Self, OrchestratorError> {
        let path = job_dir.join(JOB_FILE);
        let text = fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|source| OrchestratorError::Json { path, source })
    }
}

/// Where the built-in entrypoints live and how often to poll children.
#[derive(Debug, Clone)]
pub struct LaunchOptions {
    pub store_root: PathBuf,
    /// Binary providing the `server` and `client` subcommands.
    pub exe: PathBuf,
    pub job_id: Option<String>,
    pub poll: Duration,
}

impl LaunchOptions {
    pub fn new(store_root: impl Into<PathBuf>) -> std::io::Result<Self> {
        Ok(LaunchOptions {
            store_root: store_root.into(),
            exe: std::env::current_exe()?,
            job_id: None,
            poll: Duration::from_millis(20),
        })
    }
}

/// A job whose data and metadata exist but whose processes are not started.
#[derive(Debug, Clone)]
pub struct PreparedJob {
    pub spec: JobSpec,
    pub config_dir: PathBuf,
    pub record: JobRecord,
}

fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn new_job_id() -> String {
    let suffix: u16 = rand::rng().random();
    format!("job-{}-{suffix:04x}", unix_ms())
}

fn free_local_address() -> std::io::Result<String> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    Ok(l.local_addr()?.to_string())
}

fn absolute(p: &Path) -> std::io::Result<PathBuf> {
    if p.is_absolute() {
        Ok(p.to_path_buf())
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

/// Parses the config, registers the job, writes shards and the resolved
/// experiment file.
pub fn prepare_job(
    config_path: &Path,
    opts: &LaunchOptions,
) -> Result<PreparedJob, OrchestratorError> {
    let loaded = parse_config(config_path)?;
    let store_root = absolute(&opts.store_root)?;
    let store = MetricStore::open(&store_root)?;
    let job_id = opts.job_id.clone().unwrap_or_else(new_job_id);
    let job_dir = store.create_job(&job_id)?;
    let spec = JobSpec::new(&job_id, &store_root, &loaded)?;
    spec.save(&job_dir.join(EXPERIMENT_FILE))?;
    materialize_data(&spec)?;
    fs::create_dir_all(job_dir.join("logs"))?;
    let record = JobRecord {
        job_id,
        config_path: absolute(config_path)?,
        created_unix_ms: unix_ms(),
        finished_unix_ms: None,
        state: JobState::Created,
        supervisor_pid: std::process::id(),
        server_address: free_local_address()?,
        processes: Vec::new(),
        error: None,
    };
    record.save(&job_dir)?;
    Ok(PreparedJob {
        spec,
        config_dir: absolute(&loaded.dir)?,
        record,
    })
}

fn command_for(
    entry: &Entrypoint,
    builtin_sub: &str,
    exe: &Path,
    config_dir: &Path,
) -> (String, Vec<String>) {
    let name = entry.entrypoint.as_str();
    if name == BUILTIN_SERVER || name == BUILTIN_CLIENT {
        let sub = if name == BUILTIN_SERVER {
            "server"
        } else {
            "client"
        };
        debug_assert_eq!(sub, builtin_sub);
        return (exe.display().to_string(), vec![sub.to_string()]);
    }
    let resolved = if name.contains('/') || name.ends_with(".py") {
        config_dir.join(name).display().to_string()
    } else {
        name.to_string()
    };
    if name.ends_with(".py") {
        ("python3".to_string(), vec![resolved])
    } else {
        (resolved, Vec::new())
    }
}

struct Running {
    child: Option<Child>,
    index: usize,
}

fn exit_code(status: ExitStatus) -> i32 {
    #[cfg(unix)]
    {
        use std::os::unix::process::ExitStatusExt;
        if let Some(sig) = status.signal() {
            return 128 + sig;
        }
    }
    status.code().unwrap_or(-1)
}

struct Supervisor<'a> {
    job: &'a mut PreparedJob,
    job_dir: PathBuf,
    running: Vec<Running>,
}

impl Supervisor<'_> {
    fn spawn(
        &mut self,
        name: String,
        role: Role,
        client_id: Option<u32>,
        dev_type: Option<String>,
        env: BTreeMap<String, String>,
        exe: &Path,
    ) -> Result<(), OrchestratorError> {
        let cfg = &self.job.spec.config;
        let (entry, sub) = match role {
            Role::Server => (&cfg.code.server, "server"),
            Role::Client => (&cfg.code.client, "client"),
        };
        let (program, mut args) = command_for(entry, sub, exe, &self.job.config_dir);
        args.extend(substitute_env(&entry.args.to_vec(), &env)?);
        let log = self.job_dir.join("logs").join(format!("{name}.log"));
        let out = File::create(&log)?;
        let err = out.try_clone()?;
        let mut cmd = Command::new(&program);
        cmd.args(&args)
            .current_dir(&self.job_dir)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err);
        for (k, _) in std::env::vars_os() {
            if k.to_string_lossy().starts_with(ENV_PREFIX) {
                cmd.env_remove(&k);
            }
        }
        cmd.envs(&env);
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            cmd.process_group(0);
        }
        #[cfg(target_os = "linux")]
        {
            use std::os::unix::process::CommandExt;
            // SAFETY: prctl is async-signal-safe.
            unsafe {
                cmd.pre_exec(|| {
                    libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
                    Ok(())
                });
            }
        }
        let child = cmd.spawn().map_err(|source| OrchestratorError::Spawn {
            name: name.clone(),
            source,
        })?;
        log::info!("started {name} (pid {})", child.id());
        self.job.record.processes.push(ProcessRecord {
            name,
            role,
            client_id,
            dev_type,
            program,
            args,
            env,
            pid: Some(child.id()),
            state: ProcState::Running,
            exit_code: None,
            log,
        });
        self.running.push(Running {
            child: Some(child),
            index: self.job.record.processes.len() - 1,
        });
        Ok(())
    }

    fn kill_all(&mut self) {
        for r in &mut self.running {
            if let Some(mut child) = r.child.take() {
                // SAFETY: the child leads its own process group.
                #[cfg(unix)]
                unsafe {
                    libc::killpg(child.id() as libc::pid_t, libc::SIGKILL);
                }
                let _ = child.kill();
                let status = child.wait();
                let p = &mut self.job.record.processes[r.index];
                p.state = ProcState::Killed;
                p.exit_code = status.ok().map(exit_code);
            }
        }
    }

    /// Polls children; returns the failure reason if any process failed.
    fn poll(&mut self) -> Result<Option<String>, OrchestratorError> {
        let mut failure = None;
        let mut changed = false;
        for r in &mut self.running {
            let Some(child) = r.child.as_mut() else {
                continue;
            };
            if let Some(status) = child.try_wait()? {
                r.child = None;
                changed = true;
                let p = &mut self.job.record.processes[r.index];
                p.state = ProcState::Exited;
                p.exit_code = Some(exit_code(status));
                if !status.success() && failure.is_none() {
                    failure = Some(format!("{} exited with code {}", p.name, exit_code(status)));
                }
            }
        }
        if changed {
            self.job.record.save(&self.job_dir)?;
        }
        Ok(failure)
    }

    fn alive(&self, role: Role) -> usize {
        self.running
            .iter()
            .filter(|r| r.child.is_some() && self.job.record.processes[r.index].role == role)
            .count()
    }
}

/// Spawns the server and clients and blocks until the job ends.
pub fn supervise(
    job: &mut PreparedJob,
    opts: &LaunchOptions,
) -> Result<JobRecord, OrchestratorError> {
    let job_dir = job.spec.job_dir();
    job.record.state = JobState::Running;
    job.record.supervisor_pid = std::process::id();
    job.record.save(&job_dir)?;
    let n = job.spec.config.n_clients();
    let addr = job.record.server_address.clone();
    let roster = job.spec.roster.clone();
    let mut sup = Supervisor {
        job,
        job_dir: job_dir.clone(),
        running: Vec::new(),
    };

    let started = (|| -> Result<(), OrchestratorError> {
        let env = BTreeMap::from([
            (ENV_SERVER_ADDRESS.to_string(), addr.clone()),
            (ENV_N_CLIENTS.to_string(), n.to_string()),
        ]);
        sup.spawn("server".into(), Role::Server, None, None, env, &opts.exe)?;
        for r in &roster {
            let env = BTreeMap::from([
                (ENV_SERVER_ADDRESS.to_string(), addr.clone()),
                (ENV_N_CLIENTS.to_string(), n.to_string()),
                (ENV_CLIENT_ID.to_string(), r.client_id.to_string()),
                (ENV_CLIENT_DEV_TYPE.to_string(), r.dev_type.clone()),
            ]);
            sup.spawn(
                format!("client-{:04}", r.client_id),
                Role::Client,
                Some(r.client_id),
                Some(r.dev_type.clone()),
                env,
                &opts.exe,
            )?;
        }
        Ok(())
    })();

    let mut failure = started.err().map(|e| e.to_string());
    if failure.is_none() {
        sup.job.record.save(&job_dir)?;
    }
    let mut server_done_at: Option<Instant> = None;
    while failure.is_none() {
        failure = sup.poll()?;
        if failure.is_some() {
            break;
        }
        if sup.alive(Role::Server) + sup.alive(Role::Client) == 0 {
            break;
        }
        if sup.alive(Role::Server) == 0 {
            let since = *server_done_at.get_or_insert_with(Instant::now);
            if since.elapsed() > SHUTDOWN_GRACE {
                failure = Some(format!(
                    "{} client(s) still running {SHUTDOWN_GRACE:?} after the server finished",
                    sup.alive(Role::Client)
                ));
            }
        }
        thread::sleep(opts.poll);
    }
    if failure.is_some() {
        sup.kill_all();
    }
    let record = &mut sup.job.record;
    record.finished_unix_ms = Some(unix_ms());
    match failure {
        Some(reason) => {
            log::error!("job {} failed: {reason}", record.job_id);
            record.state = JobState::Failed;
            record.error = Some(reason);
        }
        None => record.state = JobState::Finished,
    }
    record.save(&job_dir)?;
    Ok(record.clone())
}

/// Prepares and runs a job to completion. Fails if any process failed.
pub fn launch_job(
    config_path: &Path,
    opts: &LaunchOptions,
) -> Result<JobRecord, OrchestratorError> {
    let mut job = prepare_job(config_path, opts)?;
    let record = supervise(&mut job, opts)?;
    match record.state {
        JobState::Finished => Ok(record),
        _ => Err(OrchestratorError::Failed {
            job_id: record.job_id.clone(),
            reason: record.error.clone().unwrap_or_default(),
        }),
    }
}

pub fn pid_alive(pid: u32) -> bool {
    // SAFETY: signal 0 only checks for existence and permission.
    unsafe { libc::kill(pid as libc::pid_t, 0) == 0 }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProcessStatus {
    pub name: String,
    pub pid: Option<u32>,
    pub alive: bool,
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JobStatus {
    pub job_id: String,
    pub state: JobState,
    pub error: Option<String>,
    pub processes: Vec<ProcessStatus>,
}

fn job_dir_checked(store_root: &Path, job_id: &str) -> Result<PathBuf, OrchestratorError> {
    let store = MetricStore::open(store_root)?;
    let dir = store.job_dir(job_id);
    if !store.job_exists(job_id) || !dir.join(JOB_FILE).is_file() {
        return Err(OrchestratorError::UnknownJob(job_id.to_string()));
    }
    Ok(dir)
}

pub fn job_status(store_root: &Path, job_id: &str) -> Result<JobStatus, OrchestratorError> {
    let dir = job_dir_checked(store_root, job_id)?;
    let record = JobRecord::load(&dir)?;
    let mut state = record.state;
    let mut error = record.error.clone();
    if matches!(state, JobState::Running | JobState::Created) && !pid_alive(record.supervisor_pid) {
        state = JobState::Failed;
        error.get_or_insert_with(|| "supervisor exited before the job finished".into());
    }
    let processes = record
        .processes
        .iter()
        .map(|p| ProcessStatus {
            name: p.name.clone(),
            pid: p.pid,
            alive: p.state == ProcState::Running && p.pid.is_some_and(pid_alive),
            exit_code: p.exit_code,
        })
        .collect();
    Ok(JobStatus {
        job_id: record.job_id,
        state,
        error,
        processes,
    })
}

#[derive(Debug, Clone)]
pub struct MetricsOutput {
    pub export: ExportSummary,
    pub summary: SummaryRow,
    pub warnings: Vec<String>,
}

/// Exports a finished job's CSVs plus `summary.csv` and `summary.json`.
pub fn get_metrics(
    store_root: &Path,
    job_id: &str,
    out_dir: &Path,
) -> Result<MetricsOutput, OrchestratorError> {
    let status = job_status(store_root, job_id)?;
    if matches!(status.state, JobState::Running | JobState::Created) {
        return Err(OrchestratorError::StillRunning(job_id.to_string()));
    }
    let dir = job_dir_checked(store_root, job_id)?;
    let spec = JobSpec::load(&dir.join(EXPERIMENT_FILE))?;
    let records = MetricStore::open(store_root)?.read_job(job_id)?;
    let export = export_records(&records, out_dir)?;
    let mut idle = BTreeMap::new();
    for r in &spec.roster {
        idle.insert(r.client_id, spec.profile_for(&r.dev_type)?.idle_power_w);
    }
    let analysis = analyze_job(
        &records,
        &IdleSource::Given(idle),
        spec.config.strategy.target_accuracy,
        ActiveStages::default(),
    )?;
    let mut warnings = analysis.warnings.clone();
    if status.state == JobState::Failed {
        warnings.push(format!(
            "job failed: {}",
            status
                .error
                .clone()
                .unwrap_or_else(|| "unknown reason".into())
        ));
    }
    for w in &warnings {
        log::warn!("{job_id}: {w}");
    }
    let summary = SummaryRow {
        job_id: job_id.to_string(),
        algorithm: spec.config.strategy.algorithm.as_str().to_string(),
        model: spec.config.model_name(),
        fraction_fit: spec.config.strategy.fraction_fit,
        max_val_acc: analysis.max_val_acc,
        tta_s: analysis.tta_s,
        eta_j: analysis.eta_j,
        edp_js: analysis.edp_js,
    };
    write_summary_csv(&out_dir.join("summary.csv"), std::slice::from_ref(&summary))?;
    write_summary_json(
        &out_dir.join("summary.json"),
        std::slice::from_ref(&summary),
    )?;
    Ok(MetricsOutput {
        export,
        summary,
        warnings,
    })
}
