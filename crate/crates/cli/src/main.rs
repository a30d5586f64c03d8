use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Parser, Subcommand};

use colext_core::config::{
    ConfigError, ENV_CLIENT_DEV_TYPE, ENV_CLIENT_ID, ENV_N_CLIENTS, ENV_SERVER_ADDRESS,
};
use colext_core::emulator::ProfileSet;
use colext_core::job::{run_client, run_server, JobError, JobSpec, EXPERIMENT_FILE};
use colext_core::orchestrator::{
    get_metrics, job_status, prepare_job, supervise, JobState, LaunchOptions, OrchestratorError,
};

#[derive(Parser)]
#[command(
    name = "colext",
    version,
    about = "Single-host federated learning testbed"
)]
struct Cli {
    /// Job store root.
    #[arg(long, global = true, default_value = ".colext")]
    store: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment config to completion.
    LaunchJob {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, alias = "job_id")]
        job_id: Option<String>,
    },
    /// Export a finished job's metrics and summary.
    GetMetrics {
        #[arg(long, alias = "job_id")]
        job_id: String,
        /// Output directory, `<store>/<job_id>/export` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    Status {
        #[arg(long, alias = "job_id")]
        job_id: String,
    },
    Profiles {
        #[command(subcommand)]
        cmd: ProfilesCmd,
    },
    /// Built-in federated server (started by launch-job).
    Server {
        #[arg(long = "n_clients", alias = "n-clients")]
        n_clients: Option<u32>,
        #[arg(long = "n_rounds", alias = "n-rounds")]
        n_rounds: Option<u32>,
        #[arg(long)]
        address: Option<String>,
        /// Directory holding the job's experiment file; the working directory by default.
        #[arg(long = "job_dir", alias = "job-dir")]
        job_dir: Option<PathBuf>,
    },
    /// Built-in federated client (started by launch-job).
    Client {
        #[arg(long = "server_addr", alias = "server-addr")]
        server_addr: Option<String>,
        #[arg(long = "client_id", alias = "client-id")]
        client_id: Option<u32>,
        #[arg(long = "job_dir", alias = "job-dir")]
        job_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProfilesCmd {
    /// Print the built-in device profiles as YAML.
    List,
}

fn env_var(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.is_empty())
}

fn load_spec(job_dir: Option<PathBuf>) -> Result<JobSpec> {
    let dir = match job_dir {
        Some(d) => d,
        None => std::env::current_dir()?,
    };
    let path = dir.join(EXPERIMENT_FILE);
    JobSpec::load(&path).with_context(|| format!("loading {}", path.display()))
}

fn print_metrics(store: &Path, job_id: &str, out: Option<PathBuf>) -> Result<()> {
    let out = out.unwrap_or_else(|| store.join(job_id).join("export"));
    let m = get_metrics(store, job_id, &out)?;
    for w in &m.warnings {
        eprintln!("warning: {w}");
    }
    for p in [
        &m.export.samples_csv,
        &m.export.stage_events_csv,
        &m.export.rounds_csv,
    ] {
        println!("{}", p.display());
    }
    println!("{}", out.join("summary.csv").display());
    println!("{}", out.join("summary.json").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::LaunchJob { config, job_id } => {
            let mut opts = LaunchOptions::new(&cli.store)?;
            opts.job_id = job_id;
            let mut job = prepare_job(&config, &opts)?;
            println!("{}", job.record.job_id);
            let record = supervise(&mut job, &opts)?;
            if record.state != JobState::Finished {
                return Err(anyhow!(
                    "job {} failed: {}",
                    record.job_id,
                    record.error.unwrap_or_default()
                ));
            }
            eprintln!("job {} finished", record.job_id);
        }
        Cmd::GetMetrics { job_id, out } => print_metrics(&cli.store, &job_id, out)?,
        Cmd::Status { job_id } => {
            let s = job_status(&cli.store, &job_id)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Profiles {
            cmd: ProfilesCmd::List,
        } => print!("{}", ProfileSet::builtin().to_yaml()),
        Cmd::Server {
            n_clients,
            n_rounds,
            address,
            job_dir,
        } => {
            let spec = load_spec(job_dir)?;
            let address = address
                .or_else(|| env_var(ENV_SERVER_ADDRESS))
                .ok_or_else(|| {
                    anyhow!("no listen address: pass --address or set {ENV_SERVER_ADDRESS}")
                })?;
            let n_clients = match n_clients {
                Some(n) => Some(n),
                None => env_var(ENV_N_CLIENTS).map(|v| v.parse()).transpose()?,
            };
            let outcome = run_server(&spec, &address, n_clients, n_rounds)?;
            log::info!("server finished {} rounds", outcome.history.len());
        }
        Cmd::Client {
            server_addr,
            client_id,
            job_dir,
        } => {
            let spec = load_spec(job_dir)?;
            let addr = server_addr
                .or_else(|| env_var(ENV_SERVER_ADDRESS))
                .ok_or_else(|| {
                    anyhow!("no server address: pass --server_addr or set {ENV_SERVER_ADDRESS}")
                })?;
            let id = match client_id {
                Some(id) => id,
                None => env_var(ENV_CLIENT_ID)
                    .ok_or_else(|| {
                        anyhow!("no client id: pass --client_id or set {ENV_CLIENT_ID}")
                    })?
                    .parse()
                    .context(ENV_CLIENT_ID)?,
            };
            let dev_type = env_var(ENV_CLIENT_DEV_TYPE);
            let summary = run_client(&spec, &addr, id, dev_type.as_deref())?;
            log::info!(
                "client {id} done: {} fits, {} evals",
                summary.fits,
                summary.evals
            );
        }
    }
    Ok(())
}

fn is_validation(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<ConfigError>().is_some()
            || e.downcast_ref::<OrchestratorError>()
                .is_some_and(|o| o.is_validation())
            || matches!(e.downcast_ref::<JobError>(), Some(JobError::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_validation(&e) { 1 } else { 2 })
        }
    }
}
