//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Cursor;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use colext_core::analysis::{
    active_power, analyze_job, compute_edp, compute_energy, per_batch_stats, round_fit_totals,
    ActiveStages, IdleSource,
};
use colext_core::config::parse_config;
use colext_core::dataset::Dataset;
use colext_core::emulator::{DeviceProfile, ProfileSet};
use colext_core::job::{load_final_params, JobSpec, EXPERIMENT_FILE};
use colext_core::metrics::associate::associate_rounds;
use colext_core::metrics::export::export_csv;
use colext_core::metrics::records::{emit_stage_event, Edge, MetricSample, StageKind};
use colext_core::metrics::scraper::{ConstantSensors, ScraperConfig, ScraperHandle};
use colext_core::metrics::store::{JobRecords, MetricStore};
use colext_core::model::{
    loss_and_grad, Activation, LayerShape, ModelSpec, ParamVector, WidthRatio,
};
use colext_core::orchestrator::{JobRecord, JobState, Role};
use colext_core::protocol::wire::{read_message, Message};
use colext_core::strategy::{aggregate_fedavg, heterofl_aggregate, ClientUpdate, RoundRecord};

const BIN: &str = env!("CARGO_BIN_EXE_colext");

// Tolerances and thresholds, one place.
const C1_MIN_ACC: f64 = 0.90;
const C1_MAX_WALL_S: f64 = 60.0;
const C2_HETERO_TOL: f64 = 1e-7;
const C3_REL_TOL: f64 = 0.10;
const C4_TARGET: f64 = 0.85;
const C5_TOL: f64 = 1e-9;
const C6_REL_TOL: f64 = 1e-6;
const C7_SAMPLES: (usize, usize) = (198, 202);
const C7_BATCH: (usize, usize) = (31, 35);
const C11_MESSAGES: usize = 10_000;
const C12_INSTANCES: usize = 100;
const C12_REL_TOL: f64 = 1e-4;
const C12_STEP: f64 = 1e-5;

type Check = Result<String, String>;
type Criterion<'a> = (u32, &'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(ctx: &str) -> impl FnOnce(E) -> String + '_ {
    move |e| format!("{ctx}: {e}")
}

struct Lab {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    store: PathBuf,
}

struct Job {
    id: String,
    dir: PathBuf,
    export: PathBuf,
    wall: Duration,
}

impl Lab {
    fn new() -> Self {
        let tmp = tempfile::tempdir().expect("tempdir");
        let root = tmp.path().to_path_buf();
        let store = root.join("store");
        Lab {
            _tmp: tmp,
            root,
            store,
        }
    }

    fn write(&self, rel: &str, text: &str) -> PathBuf {
        let p = self.root.join(rel);
        fs::create_dir_all(p.parent().unwrap()).unwrap();
        fs::write(&p, text).unwrap();
        p
    }

    fn colext(&self) -> Command {
        let mut cmd = Command::new(BIN);
        cmd.arg("--store").arg(&self.store).current_dir(&self.root);
        for (k, _) in std::env::vars() {
            if k.starts_with("COLEXT_") {
                cmd.env_remove(k);
            }
        }
        cmd.env("RUST_LOG", "warn");
        cmd
    }

    fn run_job(&self, config: &Path, id: &str) -> Result<Job, String> {
        let start = Instant::now();
        let out = self
            .colext()
            .args(["launch-job", "--config"])
            .arg(config)
            .args(["--job-id", id])
            .output()
            .map_err(err("launch-job"))?;
        let wall = start.elapsed();
        if !out.status.success() {
            return Err(format!(
                "launch-job {id} exited with {}: {}",
                out.status,
                String::from_utf8_lossy(&out.stderr)
            ));
        }
        let printed = String::from_utf8_lossy(&out.stdout);
        ensure(printed.lines().next() == Some(id), || {
            format!("launch-job printed {printed:?}")
        })?;
        let dir = self.store.join(id);
        let export = dir.join("export");
        Ok(Job {
            id: id.to_string(),
            dir,
            export,
            wall,
        })
    }

    fn launch(&self, name: &str, yaml: &str) -> Result<Job, String> {
        let cfg = self.write(&format!("{name}/config.yaml"), yaml);
        let job = self.run_job(&cfg, name)?;
        let out = self
            .colext()
            .args(["get-metrics", "--job-id", name, "--out"])
            .arg(&job.export)
            .output()
            .map_err(err("get-metrics"))?;
        ensure(out.status.success(), || {
            format!(
                "get-metrics {name}: {}",
                String::from_utf8_lossy(&out.stderr)
            )
        })?;
        Ok(job)
    }

    fn records(&self, job: &Job) -> Result<JobRecords, String> {
        MetricStore::open(&self.store)
            .and_then(|s| s.read_job(&job.id))
            .map_err(err("read_job"))
    }
}

impl Job {
    fn spec(&self) -> Result<JobSpec, String> {
        JobSpec::load(&self.dir.join(EXPERIMENT_FILE)).map_err(err("experiment file"))
    }

    fn record(&self) -> Result<JobRecord, String> {
        JobRecord::load(&self.dir).map_err(err("job record"))
    }

    fn train_shard(&self, client: u32) -> Result<Dataset, String> {
        let (train, _) = self.spec()?.shard_paths(client);
        Dataset::load(&train).map_err(err("shard"))
    }

    fn csv(&self, name: &str) -> Result<Vec<BTreeMap<String, String>>, String> {
        let mut rdr = csv::Reader::from_path(self.export.join(name)).map_err(err(name))?;
        let headers = rdr.headers().map_err(err(name))?.clone();
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(err(name))?;
            rows.push(
                headers
                    .iter()
                    .zip(rec.iter())
                    .map(|(h, v)| (h.to_string(), v.to_string()))
                    .collect(),
            );
        }
        Ok(rows)
    }

    fn round_accuracies(&self) -> Result<Vec<String>, String> {
        Ok(self
            .csv("rounds.csv")?
            .into_iter()
            .map(|r| r["mean_val_acc"].clone())
            .collect())
    }

    fn summary_value(&self, col: &str) -> Result<Option<f64>, String> {
        let rows = self.csv("summary.csv")?;
        let v = rows.first().ok_or("empty summary")?[col].clone();
        if v.is_empty() {
            Ok(None)
        } else {
            v.parse().map(Some).map_err(err(col))
        }
    }
}

fn base_yaml(algorithm: &str, rounds: u32, model: &str) -> String {
    format!(
        "devices:
  - {{ dev_type: JetsonXavierNX, count: 10 }}
monitoring: {{ scrapping_interval: 0.1, push_to_db_interval: 10 }}
strategy: {{ algorithm: {algorithm}, fraction_fit: 1.0, num_rounds: {rounds}, mu: 0.0, seed: 1 }}
model: {model}
data: {{ num_classes: 3, dim: 16, samples_per_client: 250, val_fraction: 0.2, skew: {{ kind: dirichlet, alpha: 1.0 }}, seed: 1 }}
training: {{ local_epochs: 1, batch_size: 16, learning_rate: 0.1 }}
emulation: {{ time_scale: 10, power_noise_sigma_w: 0.0 }}
"
    )
}

fn c1_yaml() -> String {
    base_yaml("fedavg", 20, "{}")
}

/// Shared runs of the criterion 1 configuration.
struct Shared {
    c1: Result<Job, String>,
}

fn c1_convergence(lab: &Lab, shared: &Shared) -> Check {
    let job = shared.c1.as_ref().map_err(Clone::clone)?;
    let rec = job.record()?;
    let clients = rec
        .processes
        .iter()
        .filter(|p| p.role == Role::Client)
        .count();
    ensure(clients == 10, || format!("{clients} client processes"))?;
    let spec = job.spec()?;
    ensure(spec.config.emulation.time_scale >= 10.0, || {
        "time_scale below 10".into()
    })?;
    let mut train = 0;
    let mut val = 0;
    for id in 0..10 {
        let (t, v) = spec.shard_paths(id);
        train += Dataset::load(&t).map_err(err("shard"))?.len();
        val += Dataset::load(&v).map_err(err("shard"))?.len();
    }
    let rounds = lab.records(job)?.rounds;
    ensure(rounds.len() == 20, || format!("{} rounds", rounds.len()))?;
    ensure(rounds.iter().all(|r| r.sampled_clients.len() == 10), || {
        "not all clients sampled".into()
    })?;
    let acc = rounds.last().unwrap().mean_val_accuracy;
    ensure(acc >= C1_MIN_ACC, || {
        format!("final mean accuracy {acc:.4} < {C1_MIN_ACC}")
    })?;
    let wall = job.wall.as_secs_f64();
    ensure(wall < C1_MAX_WALL_S, || format!("wall clock {wall:.1} s"))?;
    Ok(format!(
        "acc={acc:.4} after 20 rounds, wall={wall:.2}s, mean shard {}/{} train/val",
        train / 10,
        val / 10
    ))
}

fn c2_reductions(lab: &Lab) -> Check {
    let mlp = "{ hidden: [8], init_seed: 3 }";
    let hetero = "{ hidden: [8], init_seed: 3, width_ratios: { JetsonXavierNX: \"1/1\" } }";
    let avg = lab.launch("c2-fedavg", &base_yaml("fedavg", 8, mlp))?;
    let prox = lab.launch("c2-fedprox", &base_yaml("fedprox", 8, mlp))?;
    let het = lab.launch("c2-heterofl", &base_yaml("heterofl", 8, hetero))?;

    let (a, p) = (avg.round_accuracies()?, prox.round_accuracies()?);
    ensure(a == p, || {
        format!("fedprox(mu=0) history {p:?} != fedavg {a:?}")
    })?;
    let pa = load_final_params(&avg.dir).map_err(err("params"))?;
    let pp = load_final_params(&prox.dir).map_err(err("params"))?;
    ensure(pa == pp, || "fedprox(mu=0) final model differs".into())?;

    let ph = load_final_params(&het.dir).map_err(err("params"))?;
    let job_diff = max_abs_diff(pa.values(), ph.values());
    ensure(job_diff <= C2_HETERO_TOL, || {
        format!("heterofl job final model off by {job_diff:e}")
    })?;

    // direct aggregation on random updates of an MLP
    let mut rng = StdRng::seed_from_u64(22);
    let spec = ModelSpec::new(vec![5, 7, 6, 3], Activation::Relu).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let k = rng.random_range(1..8);
        let updates: Vec<ClientUpdate> = (0..k)
            .map(|i| ClientUpdate {
                client_id: i,
                params: random_params(&spec.shapes(), &mut rng),
                num_examples: rng.random_range(1..500),
                width_ratio: WidthRatio::FULL,
                train_loss: 0.0,
                val_accuracy: None,
            })
            .collect();
        let prev = random_params(&spec.shapes(), &mut rng);
        let f = aggregate_fedavg(&updates).map_err(err("fedavg"))?;
        let h = heterofl_aggregate(&updates, &prev, &spec).map_err(err("heterofl"))?;
        worst = worst.max(max_abs_diff(f.values(), h.values()));
    }
    ensure(worst <= C2_HETERO_TOL, || {
        format!("heterofl vs fedavg differ by {worst:e}")
    })?;
    Ok(format!(
        "fedprox(mu=0) identical over {} rounds; heterofl(1.0) max diff job={job_diff:e} direct={worst:e}",
        a.len()
    ))
}

fn max_abs_diff(a: &[f32], b: &[f32]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).abs())
        .fold(0.0, f64::max)
}

fn random_params(shapes: &[LayerShape], rng: &mut StdRng) -> ParamVector {
    let n: usize = shapes.iter().map(LayerShape::len).sum();
    let v = (0..n).map(|_| rng.random_range(-2.0f32..2.0)).collect();
    ParamVector::new(v, shapes.to_vec()).unwrap()
}

const C3_PROFILES: &str = "Fast: { samples_per_second: 400, idle_power_w: 3.0, active_power_delta_w: 2.0, uplink_bps: 1000000, downlink_bps: 2000000 }
Slow: { samples_per_second: 40, idle_power_w: 3.0, active_power_delta_w: 2.0, uplink_bps: 1000000, downlink_bps: 2000000 }
";

fn c3_straggler(lab: &Lab) -> Check {
    lab.write("c3/profiles.yaml", C3_PROFILES);
    let job = lab.launch(
        "c3",
        "devices:
  - { dev_type: Fast, count: 4 }
  - { dev_type: Slow, count: 1 }
monitoring: { scrapping_interval: 0.2, push_to_db_interval: 10 }
strategy: { algorithm: fedavg, fraction_fit: 1.0, num_rounds: 3, seed: 4 }
data: { skew: { kind: iid }, seed: 4 }
training: { local_epochs: 1, batch_size: 16, learning_rate: 0.1 }
emulation: { time_scale: 20, profiles_file: profiles.yaml }
",
    )?;
    let profiles = ProfileSet::from_yaml(C3_PROFILES).map_err(err("profiles"))?;
    let spec = job.spec()?;
    let n_params = spec.config.model_spec().map_err(err("model"))?.num_params() as f64;
    // fit time plus uplink time of the parameter payload alone
    let oracle = |p: &DeviceProfile, n: usize| {
        n as f64 / p.samples_per_second + 4.0 * n_params * 8.0 / p.uplink_bps
    };
    let mut expected = BTreeMap::new();
    for r in &spec.roster {
        let p = profiles.get(&r.dev_type).map_err(err("profile"))?;
        expected.insert(r.client_id, oracle(p, job.train_shard(r.client_id)?.len()));
    }
    let slow = spec
        .roster
        .iter()
        .find(|r| r.dev_type == "Slow")
        .unwrap()
        .client_id;
    let rounds = lab.records(&job)?.rounds;
    ensure(rounds.len() == 3, || format!("{} rounds", rounds.len()))?;
    let mut worst: f64 = 0.0;
    for r in &rounds {
        let d = r.fit_end_s - r.round_start_s;
        let rel = (d - expected[&slow]).abs() / expected[&slow];
        worst = worst.max(rel);
        ensure(rel <= C3_REL_TOL, || {
            format!(
                "round {} lasted {d:.4}s, straggler needs {:.4}s",
                r.round, expected[&slow]
            )
        })?;
        for (&c, &e) in &expected {
            ensure(d >= e, || {
                format!(
                    "round {} ({d:.4}s) shorter than client {c} ({e:.4}s)",
                    r.round
                )
            })?;
            let f = r.fit_durations_s.get(&c).copied().unwrap_or(0.0);
            ensure(d >= f, || {
                format!("round {} shorter than client {c}'s fit", r.round)
            })?;
        }
    }
    Ok(format!(
        "straggler {:.3}s, worst rel deviation {worst:.4}",
        expected[&slow]
    ))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn c4_fraction_trend(lab: &Lab) -> Check {
    let fractions = [0.4, 0.7, 1.0];
    let mut tta_med = Vec::new();
    let mut eta_med = Vec::new();
    for f in fractions {
        let mut tta = Vec::new();
        let mut eta = Vec::new();
        for seed in 1..=3 {
            let name = format!("c4-f{}-s{seed}", (f * 10.0) as u32);
            let job = lab.launch(
                &name,
                &format!(
                    "devices:
  - {{ dev_type: JetsonXavierNX, count: 10 }}
monitoring: {{ scrapping_interval: 0.1, push_to_db_interval: 10 }}
strategy: {{ algorithm: fedavg, fraction_fit: {f}, num_rounds: 40, target_accuracy: {C4_TARGET}, seed: {seed} }}
data: {{ skew: {{ kind: dirichlet, alpha: 1.0 }}, sigma: 1.5, seed: {seed} }}
training: {{ local_epochs: 1, batch_size: 16, learning_rate: 0.01 }}
emulation: {{ time_scale: 50 }}
"
                ),
            )?;
            tta.push(
                job.summary_value("tta_s")?
                    .ok_or_else(|| format!("{name} never reached target"))?,
            );
            eta.push(
                job.summary_value("eta_j")?
                    .ok_or_else(|| format!("{name} has no ETA"))?,
            );
        }
        tta_med.push(median(tta));
        eta_med.push(median(eta));
    }
    let detail = format!(
        "median TTA {tta_med:.3?} s, median ETA {eta_med:.2?} J over fraction_fit {fractions:?}"
    );
    ensure(tta_med.windows(2).all(|w| w[1] <= w[0]), || {
        format!("TTA not non-increasing: {detail}")
    })?;
    ensure(eta_med.windows(2).all(|w| w[1] >= w[0]), || {
        format!("ETA not non-decreasing: {detail}")
    })?;
    Ok(detail)
}

fn c5_energy_arithmetic() -> Check {
    let (p, clamped) = active_power(5.0, 2.9);
    ensure((p - 2.1).abs() <= C5_TOL && !clamped, || {
        format!("active power {p}")
    })?;
    // 100 s of training at 5.0 W framed by idle samples at 2.9 W
    let events = vec![
        emit_stage_event(0, 0, StageKind::Fit, Edge::Start, 10.0),
        emit_stage_event(0, 0, StageKind::Fit, Edge::End, 110.0),
    ];
    let samples: Vec<MetricSample> = (0..1200)
        .map(|i| {
            let ts = i as f64 * 0.1;
            MetricSample {
                ts_s: ts,
                client_id: 0,
                cpu_percent: 0.0,
                mem_bytes: 0,
                power_w: if (10.0..110.0).contains(&ts) {
                    5.0
                } else {
                    2.9
                },
                net_up_bytes: 0,
                net_down_bytes: 0,
            }
        })
        .collect();
    let round = RoundRecord {
        round: 0,
        sampled_clients: vec![0],
        aggregated_clients: vec![0],
        round_start_s: 0.0,
        fit_end_s: 110.0,
        round_end_s: 120.0,
        mean_val_accuracy: 0.0,
        fit_durations_s: BTreeMap::from([(0, 100.0)]),
        eval_durations_s: BTreeMap::new(),
    };
    let assoc = associate_rounds(&samples, &events, &[round]).map_err(err("associate"))?;
    let reports = compute_energy(
        &samples,
        &assoc,
        &IdleSource::Given(BTreeMap::from([(0, 2.9)])),
        ActiveStages::FitOnly,
    )
    .map_err(err("energy"))?;
    let r = &reports[0];
    ensure((r.mean_active_power_w - 2.1).abs() <= C5_TOL, || {
        format!("{r:?}")
    })?;
    ensure((r.active_time_s - 100.0).abs() <= C5_TOL, || {
        format!("{r:?}")
    })?;
    ensure((r.energy_j - 210.0).abs() <= C5_TOL, || {
        format!("energy {} J", r.energy_j)
    })?;
    Ok(format!(
        "active {} W, energy {} J",
        r.mean_active_power_w, r.energy_j
    ))
}

fn c6_emulator_oracle(lab: &Lab, shared: &Shared) -> Check {
    let job = shared.c1.as_ref().map_err(Clone::clone)?;
    let spec = job.spec()?;
    ensure(
        spec.config.emulation.power_noise_sigma_w == Some(0.0),
        || "noise not zero".into(),
    )?;
    let rec = lab.records(job)?;
    let target = 0.9;
    let idle = spec
        .roster
        .iter()
        .map(|r| (r.client_id, spec.profiles[&r.dev_type].idle_power_w))
        .collect();
    let a = analyze_job(
        &rec,
        &IdleSource::Given(idle),
        Some(target),
        ActiveStages::FitAndEval,
    )
    .map_err(err("analysis"))?;
    let eta = a.eta_j.ok_or("target never reached")?;
    let hit = rec
        .rounds
        .iter()
        .find(|r| r.mean_val_accuracy >= target)
        .ok_or("no round reached target")?
        .round;
    // pair stage edges independently of the analysis code
    let mut open: BTreeMap<(u32, u32, StageKind), f64> = BTreeMap::new();
    let mut expected = 0.0;
    for e in &rec.stage_events {
        let key = (e.client_id, e.round, e.kind);
        match e.edge {
            Edge::Start => {
                open.insert(key, e.ts_s);
            }
            Edge::End => {
                let start = open.remove(&key).ok_or("end without start")?;
                if e.round <= hit {
                    let dev = &spec.roster[e.client_id as usize].dev_type;
                    expected += spec.profiles[dev].active_power_delta_w * (e.ts_s - start);
                }
            }
        }
    }
    let rel = (eta - expected).abs() / expected;
    ensure(rel <= C6_REL_TOL, || {
        format!("ETA {eta} vs oracle {expected} (rel {rel:e})")
    })?;
    Ok(format!(
        "ETA {eta:.6} J vs oracle {expected:.6} J, rel {rel:.1e}"
    ))
}

fn c7_scraper_accounting(lab: &Lab, shared: &Shared) -> Check {
    let scale = 60.0;
    let store = MetricStore::open(lab.root.join("c7-store")).map_err(err("store"))?;
    store.create_job("c7").map_err(err("store"))?;
    let mut handles = Vec::new();
    for c in 0..3u32 {
        let sink = store
            .segment("c7", &format!("client-{c:04}"))
            .map_err(err("segment"))?;
        let h = ScraperHandle::spawn(
            ScraperConfig::new(0.3, 10.0, scale),
            ConstantSensors::new(scale, 4.0),
            sink,
            c,
        )
        .map_err(err("scraper"))?;
        handles.push(h);
    }
    // 60 emulated seconds
    thread::sleep(Duration::from_secs_f64(60.0 / scale));
    let stats: Vec<_> = handles
        .into_iter()
        .map(|h| h.stop().map_err(err("scraper stop")))
        .collect::<Result<_, _>>()?;
    let rec = store.read_job("c7").map_err(err("read"))?;
    let out = lab.root.join("c7-export");
    let summary = export_csv(&store, "c7", &out).map_err(err("export"))?;
    let mut per_client = BTreeMap::new();
    let mut rdr = csv::Reader::from_path(&summary.samples_csv).map_err(err("samples.csv"))?;
    for r in rdr.records() {
        let r = r.map_err(err("samples.csv"))?;
        *per_client
            .entry(r[1].parse::<u32>().map_err(err("client"))?)
            .or_insert(0usize) += 1;
    }
    let mut batches = Vec::new();
    for (c, s) in stats.iter().enumerate() {
        let c = c as u32;
        let stored = rec.samples.iter().filter(|x| x.client_id == c).count();
        ensure(
            (C7_SAMPLES.0..=C7_SAMPLES.1).contains(&s.samples_taken),
            || format!("client {c}: {} samples", s.samples_taken),
        )?;
        ensure(stored == s.samples_taken, || {
            format!("client {c}: stored {stored} of {}", s.samples_taken)
        })?;
        ensure(per_client.get(&c) == Some(&stored), || {
            format!("client {c}: exported {:?}", per_client.get(&c))
        })?;
        // the last flush is the shutdown flush
        let periodic = &s.flushes[..s.flushes.len().saturating_sub(1)];
        ensure(periodic.len() >= 5, || {
            format!("client {c}: {} periodic flushes", periodic.len())
        })?;
        for f in periodic {
            ensure((C7_BATCH.0..=C7_BATCH.1).contains(&f.samples), || {
                format!("client {c}: flush at {:.1}s carried {}", f.at_s, f.samples)
            })?;
            batches.push(f.samples);
        }
        for w in periodic.windows(2) {
            let gap = w[1].at_s - w[0].at_s;
            ensure((gap - 10.0).abs() <= 0.2 * 10.0, || {
                format!("client {c}: flush gap {gap:.2}s")
            })?;
        }
    }
    // exported rows equal stored rows on a real job
    let job = shared.c1.as_ref().map_err(Clone::clone)?;
    let jr = lab.records(job)?;
    let counts = [
        ("samples.csv", jr.samples.len()),
        ("stage_events.csv", jr.stage_events.len()),
        ("rounds.csv", jr.rounds.len()),
    ];
    for (name, stored) in counts {
        let rows = job.csv(name)?.len();
        ensure(rows == stored, || {
            format!("{name}: {rows} rows vs {stored} stored")
        })?;
    }
    Ok(format!(
        "samples/client {:?}, periodic batches {:?}..{:?}, job export rows match store",
        stats.iter().map(|s| s.samples_taken).collect::<Vec<_>>(),
        batches.iter().min().unwrap(),
        batches.iter().max().unwrap()
    ))
}

const C8_PROFILES: &str = "A: { samples_per_second: 100, idle_power_w: 3.0, active_power_delta_w: 3.0, uplink_bps: 100000000, downlink_bps: 200000000 }
B: { samples_per_second: 200, idle_power_w: 3.0, active_power_delta_w: 2.0, uplink_bps: 100000000, downlink_bps: 200000000 }
C: { samples_per_second: 150, idle_power_w: 3.0, active_power_delta_w: 4.0, uplink_bps: 100000000, downlink_bps: 200000000 }
";

fn c8_edp_ordering(lab: &Lab) -> Check {
    lab.write("c8/profiles.yaml", C8_PROFILES);
    let job = lab.launch(
        "c8",
        "devices:
  - { dev_type: A, count: 1 }
  - { dev_type: B, count: 1 }
  - { dev_type: C, count: 1 }
monitoring: { scrapping_interval: 0.05, push_to_db_interval: 10 }
strategy: { algorithm: fedavg, fraction_fit: 1.0, num_rounds: 2, seed: 8 }
data: { skew: { kind: iid }, seed: 8 }
training: { local_epochs: 1, batch_size: 16, learning_rate: 0.1 }
emulation: { time_scale: 20, profiles_file: profiles.yaml, power_noise_sigma_w: 0.0 }
",
    )?;
    let spec = job.spec()?;
    let rec = lab.records(&job)?;
    let idle = spec.roster.iter().map(|r| (r.client_id, 3.0)).collect();
    let a = analyze_job(&rec, &IdleSource::Given(idle), None, ActiveStages::FitOnly)
        .map_err(err("analysis"))?;
    let mut per = BTreeMap::new();
    for r in &spec.roster {
        let report = a
            .energy
            .iter()
            .find(|e| e.client_id == r.client_id)
            .ok_or("missing report")?;
        let n = job.train_shard(r.client_id)?.len();
        let batches = n.div_ceil(spec.config.training.batch_size);
        let (t, e) = round_fit_totals(report, &a.windows, 0);
        let (tb, eb) = per_batch_stats(t, e, batches).map_err(err("per batch"))?;
        let edp = compute_edp(tb, eb).map_err(err("edp"))?;
        per.insert(r.dev_type.clone(), (tb, eb, edp));
    }
    let b = per["B"];
    for other in ["A", "C"] {
        let o = per[other];
        ensure(b.0 < o.0 && b.1 < o.1, || {
            format!("precondition: B {b:?} not faster and cheaper than {other} {o:?}")
        })?;
        ensure(b.2 < o.2, || {
            format!("EDP of B {} not below {other} {}", b.2, o.2)
        })?;
    }
    let mut ranked: Vec<_> = per.iter().map(|(k, v)| (v.2, k.clone())).collect();
    ranked.sort_by(|x, y| x.0.total_cmp(&y.0));
    Ok(format!(
        "EDP per batch: {}",
        ranked
            .iter()
            .map(|(v, k)| format!("{k}={v:.5}"))
            .collect::<Vec<_>>()
            .join(" < ")
    ))
}

fn c9_determinism(lab: &Lab, shared: &Shared) -> Check {
    let a = shared.c1.as_ref().map_err(Clone::clone)?;
    let b = lab.launch("c9-repeat", &c1_yaml())?;
    let ra = fs::read(a.export.join("rounds.csv")).map_err(err("rounds.csv"))?;
    let rb = fs::read(b.export.join("rounds.csv")).map_err(err("rounds.csv"))?;
    ensure(ra == rb, || "rounds.csv differs".into())?;
    let pa = fs::read(a.dir.join("final_params.bin")).map_err(err("params"))?;
    let pb = fs::read(b.dir.join("final_params.bin")).map_err(err("params"))?;
    ensure(pa == pb, || "final parameters differ".into())?;
    Ok(format!(
        "rounds.csv ({} bytes) and final model ({} bytes) identical",
        ra.len(),
        pa.len()
    ))
}

const WORKFLOW_EXAMPLE: &str = r#"code:
  client:
    entrypoint: "client.py"
    args:
        - "--server_addr=${COLEXT_SERVER_ADDRESS}"
        - "--client_id=${COLEXT_CLIENT_ID}"
  server:
    entrypoint: "server.py"
    args: "--n_clients=${COLEXT_N_CLIENTS} --n_rounds=3"
devices:
  - { dev_type: LattePandaDelta3, count: 4 }
  - { dev_type: OrangePi5B,  count: 2 }
  - { dev_type: JetsonOrinNano, count: 4 }
monitoring:
  scrapping_interval: 0.3 # in seconds
  push_to_db_interval: 10 # in seconds
"#;

const ENV_DUMP_PY: &str = r#"import json, os, sys
env = {k: v for k, v in os.environ.items() if k.startswith("COLEXT_")}
name = sys.argv[0].rsplit("/", 1)[-1].split(".")[0]
if name == "client":
    name += "-" + env.get("COLEXT_CLIENT_ID", "x")
with open("env-" + name + ".json", "w") as f:
    json.dump({"env": env, "argv": sys.argv[1:]}, f)
"#;

fn c10_config_env(lab: &Lab) -> Check {
    let cfg = lab.write("c10/config.yaml", WORKFLOW_EXAMPLE);
    lab.write("c10/client.py", ENV_DUMP_PY);
    lab.write("c10/server.py", ENV_DUMP_PY);
    let loaded = parse_config(&cfg).map_err(err("parse"))?;
    let c = &loaded.config;
    let types: BTreeSet<_> = c.devices.iter().map(|d| d.dev_type.as_str()).collect();
    ensure(c.n_clients() == 10 && types.len() == 3, || {
        format!("{} clients, {} types", c.n_clients(), types.len())
    })?;
    let iv = (
        c.monitoring.scrapping_interval,
        c.monitoring.push_to_db_interval,
    );
    ensure(iv == (0.3, 10.0), || format!("intervals {iv:?}"))?;

    // stale variables in the launcher's environment must not leak through
    let out = lab
        .colext()
        .env("COLEXT_CLIENT_ID", "99")
        .env("COLEXT_STALE", "1")
        .args(["launch-job", "--config"])
        .arg(&cfg)
        .args(["--job-id", "c10"])
        .output()
        .map_err(err("launch"))?;
    ensure(out.status.success(), || {
        format!("launch: {}", String::from_utf8_lossy(&out.stderr))
    })?;
    let dir = lab.store.join("c10");
    let rec = JobRecord::load(&dir).map_err(err("job record"))?;
    let addr = rec.server_address.clone();
    let read = |name: &str| -> Result<(BTreeMap<String, String>, Vec<String>), String> {
        let text = fs::read_to_string(dir.join(format!("env-{name}.json"))).map_err(err(name))?;
        let v: serde_json::Value = serde_json::from_str(&text).map_err(err(name))?;
        let env = serde_json::from_value(v["env"].clone()).map_err(err(name))?;
        let argv = serde_json::from_value(v["argv"].clone()).map_err(err(name))?;
        Ok((env, argv))
    };
    let roster = c.roster();
    for r in &roster {
        let (env, argv) = read(&format!("client-{}", r.client_id))?;
        let want = BTreeMap::from([
            ("COLEXT_SERVER_ADDRESS".to_string(), addr.clone()),
            ("COLEXT_N_CLIENTS".to_string(), "10".to_string()),
            ("COLEXT_CLIENT_ID".to_string(), r.client_id.to_string()),
            ("COLEXT_CLIENT_DEV_TYPE".to_string(), r.dev_type.clone()),
        ]);
        ensure(env == want, || {
            format!("client {} env {env:?}", r.client_id)
        })?;
        let args = vec![
            format!("--server_addr={addr}"),
            format!("--client_id={}", r.client_id),
        ];
        ensure(argv == args, || {
            format!("client {} argv {argv:?}", r.client_id)
        })?;
    }
    ensure(
        roster[..4].iter().all(|r| r.dev_type == "LattePandaDelta3"),
        || "roster order".into(),
    )?;
    let (env, argv) = read("server")?;
    let want = BTreeMap::from([
        ("COLEXT_SERVER_ADDRESS".to_string(), addr.clone()),
        ("COLEXT_N_CLIENTS".to_string(), "10".to_string()),
    ]);
    ensure(env == want, || format!("server env {env:?}"))?;
    ensure(argv == ["--n_clients=10", "--n_rounds=3"], || {
        format!("server argv {argv:?}")
    })?;
    Ok(format!(
        "10 clients over {types:?}, intervals {iv:?}; client env has exactly the four variables, server has address and count"
    ))
}

fn random_string(rng: &mut StdRng) -> String {
    const ALPHABET: &[char] = &[
        'a', 'Z', '0', '_', '-', ' ', 'é', 'λ', '中', '🚀', '\n', '\0',
    ];
    let n = rng.random_range(0..24);
    (0..n)
        .map(|_| ALPHABET[rng.random_range(0..ALPHABET.len())])
        .collect()
}

fn random_kv(rng: &mut StdRng) -> Vec<(String, String)> {
    (0..rng.random_range(0..6))
        .map(|_| (random_string(rng), random_string(rng)))
        .collect()
}

fn random_shapes(rng: &mut StdRng) -> Vec<LayerShape> {
    (0..rng.random_range(0..4))
        .map(|_| {
            let rows = rng.random_range(0..6);
            LayerShape {
                rows,
                cols: rng.random_range(0..6),
                bias: if rng.random_bool(0.8) { rows } else { 0 },
            }
        })
        .collect()
}

fn random_message(rng: &mut StdRng) -> Message {
    let real = |rng: &mut StdRng| rng.random_range(-1e6f32..1e6);
    match rng.random_range(0..8) {
        0 => Message::Hello {
            client_id: rng.random(),
            dev_type: random_string(rng),
        },
        1 => Message::HelloAck {
            client_id: rng.random(),
            n_clients: rng.random(),
        },
        2 => Message::FitRequest {
            round: rng.random(),
            config: random_kv(rng),
            params: random_params(&random_shapes(rng), rng),
        },
        3 => Message::FitResponse {
            round: rng.random(),
            client_id: rng.random(),
            num_examples: rng.random(),
            train_loss: real(rng),
            metrics: random_kv(rng),
            params: random_params(&random_shapes(rng), rng),
        },
        4 => Message::EvalRequest {
            round: rng.random(),
            config: random_kv(rng),
            params: random_params(&random_shapes(rng), rng),
        },
        5 => Message::EvalResponse {
            round: rng.random(),
            client_id: rng.random(),
            num_examples: rng.random(),
            correct: rng.random(),
            loss: real(rng),
            metrics: random_kv(rng),
        },
        6 => Message::Shutdown,
        _ => Message::Error {
            message: random_string(rng),
        },
    }
}

fn c11_protocol_robustness(lab: &Lab) -> Check {
    let mut rng = StdRng::seed_from_u64(11);
    let mut frames = Vec::with_capacity(C11_MESSAGES);
    for i in 0..C11_MESSAGES {
        let m = random_message(&mut rng);
        let buf = m.encode();
        let (back, used) =
            Message::decode(&buf).map_err(|e| format!("message {i} ({}): {e}", m.name()))?;
        ensure(back == m && used == buf.len(), || {
            format!("message {i} did not round-trip")
        })?;
        let (streamed, _) = read_message(&mut Cursor::new(&buf)).map_err(err("stream"))?;
        ensure(streamed == m, || {
            format!("message {i} did not round-trip through a stream")
        })?;
        frames.push(buf);
    }
    // malformed input: truncations, bit flips, random bytes
    let mut malformed = 0usize;
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        for f in &frames {
            let cut = rng.random_range(0..f.len());
            let _ = Message::decode(&f[..cut]);
            let _ = read_message(&mut Cursor::new(&f[..cut]));
            let mut g = f.clone();
            for _ in 0..rng.random_range(1..4) {
                let i = rng.random_range(0..g.len());
                g[i] ^= 1 << rng.random_range(0..8);
            }
            let _ = Message::decode(&g);
            let noise: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
            let _ = Message::decode(&noise);
            let _ = read_message(&mut Cursor::new(&noise));
            malformed += 5;
        }
    }));
    ensure(outcome.is_ok(), || {
        "decoder panicked on malformed input".into()
    })?;

    let (pids, code) = kill_one_client(lab)?;
    ensure(code == Some(2), || format!("launcher exit code {code:?}"))?;
    let orphans: Vec<u32> = pids
        .iter()
        .copied()
        .filter(|p| Path::new(&format!("/proc/{p}")).exists())
        .collect();
    ensure(orphans.is_empty(), || {
        format!("orphan processes {orphans:?}")
    })?;
    let rec = JobRecord::load(&lab.store.join("c11-kill")).map_err(err("job record"))?;
    ensure(rec.state == JobState::Failed, || {
        format!("job state {:?}", rec.state)
    })?;
    let status = lab
        .colext()
        .args(["status", "--job-id", "c11-kill"])
        .output()
        .map_err(err("status"))?;
    let text = String::from_utf8_lossy(&status.stdout);
    ensure(text.contains("\"failed\""), || {
        format!("status output {text}")
    })?;
    Ok(format!(
        "{C11_MESSAGES} round-trips, {malformed} malformed inputs without panic; killed client failed the job ({}), {} processes reaped",
        rec.error.unwrap_or_default(),
        pids.len()
    ))
}

fn kill_one_client(lab: &Lab) -> Result<(Vec<u32>, Option<i32>), String> {
    let cfg = lab.write(
        "c11/config.yaml",
        "devices:
  - { dev_type: JetsonXavierNX, count: 3 }
monitoring: { scrapping_interval: 0.3, push_to_db_interval: 10 }
strategy: { algorithm: fedavg, fraction_fit: 1.0, num_rounds: 20, seed: 2 }
emulation: { time_scale: 1 }
",
    );
    let mut launcher = lab
        .colext()
        .args(["launch-job", "--config"])
        .arg(&cfg)
        .args(["--job-id", "c11-kill"])
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn()
        .map_err(err("launch"))?;
    let dir = lab.store.join("c11-kill");
    let deadline = Instant::now() + Duration::from_secs(30);
    let rec = loop {
        if let Ok(rec) = JobRecord::load(&dir) {
            if rec.processes.len() == 4 {
                break rec;
            }
        }
        if Instant::now() > deadline {
            let _ = launcher.kill();
            return Err("processes never started".into());
        }
        thread::sleep(Duration::from_millis(20));
    };
    // one round lasts over a second at this time scale
    thread::sleep(Duration::from_millis(700));
    let victim = rec
        .processes
        .iter()
        .find(|p| p.name == "client-0001")
        .and_then(|p| p.pid)
        .ok_or("no victim")?;
    Command::new("kill")
        .args(["-9", &victim.to_string()])
        .status()
        .map_err(err("kill"))?;
    let deadline = Instant::now() + Duration::from_secs(30);
    let status = loop {
        if let Some(s) = launcher.try_wait().map_err(err("wait"))? {
            break s;
        }
        if Instant::now() > deadline {
            let _ = launcher.kill();
            return Err("launcher did not exit after a client was killed".into());
        }
        thread::sleep(Duration::from_millis(20));
    };
    let mut pids: Vec<u32> = rec.processes.iter().filter_map(|p| p.pid).collect();
    pids.push(launcher.id());
    Ok((pids, status.code()))
}

fn c12_gradients() -> Check {
    let mut rng = StdRng::seed_from_u64(12);
    let mut worst: f64 = 0.0;
    for i in 0..C12_INSTANCES {
        let dim = rng.random_range(1..5);
        let classes = rng.random_range(2..4);
        let mut widths = vec![dim];
        for _ in 0..rng.random_range(0..3) {
            widths.push(rng.random_range(1..5));
        }
        widths.push(classes);
        let act = if rng.random_bool(0.5) {
            Activation::Relu
        } else {
            Activation::None
        };
        let spec = ModelSpec::new(widths, act).map_err(err("spec"))?;
        let n = rng.random_range(1..6);
        let features = (0..n * dim)
            .map(|_| rng.random_range(-2.0f32..2.0))
            .collect();
        let labels = (0..n)
            .map(|_| rng.random_range(0..classes) as u16)
            .collect();
        let data = Dataset::new(features, labels, dim, classes).map_err(err("data"))?;
        let idx: Vec<usize> = (0..n).collect();
        let p = spec.num_params();
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let anchor: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mu = if rng.random_bool(0.7) {
            rng.random_range(0.0..2.0)
        } else {
            0.0
        };
        let prox = Some((anchor.as_slice(), mu));
        let (_, g) = loss_and_grad(&w, &spec, &data, &idx, prox);
        let mut num = vec![0.0; p];
        for j in 0..p {
            let mut a = w.clone();
            let mut b = w.clone();
            a[j] += C12_STEP;
            b[j] -= C12_STEP;
            num[j] = (loss_and_grad(&a, &spec, &data, &idx, prox).0
                - loss_and_grad(&b, &spec, &data, &idx, prox).0)
                / (2.0 * C12_STEP);
        }
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let diff: Vec<f64> = g.iter().zip(&num).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&g).max(norm(&num)).max(1e-12);
        worst = worst.max(rel);
        ensure(rel <= C12_REL_TOL, || {
            format!("instance {i}: relative error {rel:e}")
        })?;
    }
    Ok(format!(
        "{C12_INSTANCES} instances, worst relative error {worst:.2e}"
    ))
}

fn main() {
    let lab = Lab::new();
    let shared = Shared {
        c1: lab.launch("c1", &c1_yaml()),
    };
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "end-to-end convergence",
            Box::new(|| c1_convergence(&lab, &shared)),
        ),
        (2, "algorithm reductions", Box::new(|| c2_reductions(&lab))),
        (3, "straggler synchrony", Box::new(|| c3_straggler(&lab))),
        (
            4,
            "fraction-fit trend",
            Box::new(|| c4_fraction_trend(&lab)),
        ),
        (5, "energy arithmetic", Box::new(c5_energy_arithmetic)),
        (
            6,
            "emulator-oracle energy",
            Box::new(|| c6_emulator_oracle(&lab, &shared)),
        ),
        (
            7,
            "scraper accounting",
            Box::new(|| c7_scraper_accounting(&lab, &shared)),
        ),
        (8, "EDP ordering", Box::new(|| c8_edp_ordering(&lab))),
        (9, "determinism", Box::new(|| c9_determinism(&lab, &shared))),
        (10, "config/env contract", Box::new(|| c10_config_env(&lab))),
        (
            11,
            "protocol robustness",
            Box::new(|| c11_protocol_robustness(&lab)),
        ),
        (12, "gradient correctness", Box::new(c12_gradients)),
    ];
    let mut failed = 0;
    for (n, name, f) in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS criterion {n:>2} {name} ({secs:.1}s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n:>2} {name} ({secs:.1}s): {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
