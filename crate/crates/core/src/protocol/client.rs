//! Client side of the round protocol with device emulation.
//!
//! For each request the client lays out emulated windows starting at
//! `max(t_start, when it last became free)`: download of the request, the
//! fit or eval stage, then upload of the reply. Each window is also slept
//! through in wall-clock time (divided by `time_scale`) so slow profiles
//! really do hold up the round.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::server::{KEY_STAGE_S, KEY_T_FINISH, KEY_T_START};
use super::wire::{kv_parse, read_message, write_message, KeyValues, Message, WireError};
use crate::clock::EmulatedClock;
use crate::dataset::Dataset;
use crate::emulator::{
    emulated_eval_duration, emulated_fit_duration, emulated_tx_duration, throttle, DeviceProfile,
    Direction, Stage,
};
use crate::metrics::records::{emit_stage_event, Edge, StageKind};
use crate::metrics::scraper::{ScraperConfig, ScraperError, ScraperHandle, ScraperStats};
use crate::metrics::sensors::{DeviceSensors, NetCounters};
use crate::metrics::store::{MetricStore, StoreError};
use crate::model::{
    evaluate, local_train, Activation, ModelError, ModelSpec, ParamVector, TrainConfig,
};

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("cannot reach server at {addr} after {attempts} attempts: {source}")]
    Connect {
        addr: String,
        attempts: u32,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("server error: {0}")]
    Server(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Scraper(#[from] ScraperError),
}

/// Where and how often to record telemetry.
#[derive(Debug, Clone)]
pub struct Telemetry {
    pub store: MetricStore,
    pub job_id: String,
    pub scrape_interval_s: f64,
    pub push_interval_s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ClientConfig {
    pub server_addr: String,
    pub client_id: u32,
    pub dev_type: String,
    pub profile: DeviceProfile,
    pub activation: Activation,
    pub train: Dataset,
    pub val: Dataset,
    pub telemetry: Option<Telemetry>,
    pub connect_attempts: u32,
    pub connect_backoff: Duration,
}

#[derive(Debug, Clone, Default)]
pub struct ClientSummary {
    pub fits: u32,
    pub evals: u32,
    pub scraper: Option<ScraperStats>,
}

/// Socket wrapper counting bytes for the network metrics.
struct Counted {
    inner: TcpStream,
    net: Arc<NetCounters>,
}

impl Read for Counted {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.net.add_down(n as u64);
        Ok(n)
    }
}

impl Write for Counted {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.inner.write(buf)?;
        self.net.add_up(n as u64);
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        self.inner.flush()
    }
}

fn connect(cfg: &ClientConfig) -> Result<TcpStream, ClientError> {
    let mut backoff = cfg.connect_backoff;
    let attempts = cfg.connect_attempts.max(1);
    let mut last = None;
    for attempt in 1..=attempts {
        match TcpStream::connect(&cfg.server_addr) {
            Ok(s) => {
                s.set_nodelay(true).ok();
                return Ok(s);
            }
            Err(e) => {
                log::debug!(
                    "connect attempt {attempt} to {} failed: {e}",
                    cfg.server_addr
                );
                last = Some(e);
                if attempt < attempts {
                    thread::sleep(backoff);
                    backoff = (backoff * 2).min(Duration::from_secs(1));
                }
            }
        }
    }
    Err(ClientError::Connect {
        addr: cfg.server_addr.clone(),
        attempts,
        source: last.expect("at least one attempt"),
    })
}

/// Rebuilds the layer widths a parameter vector was laid out for.
fn spec_for(params: &ParamVector, activation: Activation) -> Result<ModelSpec, ModelError> {
    let shapes = params.shapes();
    let first = shapes
        .first()
        .ok_or_else(|| ModelError::InvalidSpec("empty parameter vector".into()))?;
    let mut widths = vec![first.cols];
    widths.extend(shapes.iter().map(|s| s.rows));
    ModelSpec::new(widths, activation)
}

/// Per-round local seed derived from the job seed.
fn local_seed(seed: u64, round: u32, client_id: u32) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((round as u64) << 32 | client_id as u64)
}

struct Session {
    cfg: ClientConfig,
    clock: Arc<Mutex<EmulatedClock>>,
    scraper: Option<ScraperHandle>,
}

impl Session {
    fn stage_event(&self, round: u32, kind: StageKind, edge: Edge, ts: f64) {
        if let Some(s) = &self.scraper {
            s.stage(emit_stage_event(self.cfg.client_id, round, kind, edge, ts));
        }
    }

    /// Enters `[start, start + len)` and sleeps through it at wall speed.
    fn window(&self, stage: Stage, start: f64, len: f64) -> f64 {
        let entered = Instant::now();
        self.clock
            .lock()
            .unwrap()
            .enter(stage, start, start + len, entered);
        throttle(entered.elapsed(), len, self.cfg.profile.time_scale);
        start + len
    }

    /// Runs `work` inside an emulated stage of length `len` and returns the
    /// work's result with the stage end time.
    fn stage<T>(
        &self,
        stage: Stage,
        round: u32,
        start: f64,
        len: f64,
        work: impl FnOnce() -> T,
    ) -> (T, f64) {
        let kind = if stage == Stage::Fit {
            StageKind::Fit
        } else {
            StageKind::Eval
        };
        let entered = Instant::now();
        self.clock
            .lock()
            .unwrap()
            .enter(stage, start, start + len, entered);
        self.stage_event(round, kind, Edge::Start, start);
        let out = work();
        throttle(entered.elapsed(), len, self.cfg.profile.time_scale);
        self.stage_event(round, kind, Edge::End, start + len);
        (out, start + len)
    }

    fn anchor(&self, config: &KeyValues) -> Result<f64, ClientError> {
        let t_start: f64 = kv_parse(config, KEY_T_START)?;
        Ok(t_start.max(self.clock.lock().unwrap().last_end()))
    }

    fn fit(
        &self,
        round: u32,
        config: &KeyValues,
        params: ParamVector,
        frame_len: usize,
    ) -> Result<Message, ClientError> {
        let p = &self.cfg.profile;
        let anchor = self.anchor(config)?;
        let train_cfg = TrainConfig {
            local_epochs: kv_parse(config, "epochs")?,
            batch_size: kv_parse(config, "batch_size")?,
            learning_rate: kv_parse(config, "lr")?,
            mu: kv_parse(config, "mu")?,
            seed: local_seed(kv_parse(config, "seed")?, round, self.cfg.client_id),
        };
        let spec = spec_for(&params, self.cfg.activation)?;
        let down = emulated_tx_duration(p, frame_len as u64, Direction::Downlink);
        let fit_start = self.window(Stage::Idle, anchor, down);
        let fit_s = emulated_fit_duration(
            p,
            self.cfg.train.len() as u64,
            train_cfg.local_epochs as u64,
        );
        let (outcome, fit_end) = self.stage(Stage::Fit, round, fit_start, fit_s, || {
            local_train(&params, &spec, &self.cfg.train, &train_cfg)
        });
        let outcome = outcome?;
        let mut reply = Message::FitResponse {
            round,
            client_id: self.cfg.client_id,
            num_examples: outcome.num_examples as u32,
            train_loss: outcome.train_loss as f32,
            metrics: Vec::new(),
            params: outcome.params,
        };
        let up = emulated_tx_duration(p, reply.encode().len() as u64, Direction::Uplink);
        let t_finish = self.window(Stage::Idle, fit_end, up);
        if let Message::FitResponse { metrics, .. } = &mut reply {
            metrics.push((KEY_T_FINISH.into(), t_finish.to_string()));
            metrics.push((KEY_STAGE_S.into(), fit_s.to_string()));
            metrics.push(("num_batches".into(), outcome.num_batches.to_string()));
        }
        Ok(reply)
    }

    fn eval(
        &self,
        round: u32,
        config: &KeyValues,
        params: ParamVector,
        frame_len: usize,
    ) -> Result<Message, ClientError> {
        let p = &self.cfg.profile;
        let anchor = self.anchor(config)?;
        let spec = spec_for(&params, self.cfg.activation)?;
        let down = emulated_tx_duration(p, frame_len as u64, Direction::Downlink);
        let eval_start = self.window(Stage::Idle, anchor, down);
        let eval_s = emulated_eval_duration(p, self.cfg.val.len() as u64);
        let (scores, eval_end) = self.stage(Stage::Eval, round, eval_start, eval_s, || {
            evaluate(&params, &spec, &self.cfg.val)
        });
        let (loss, accuracy) = scores?;
        let n = self.cfg.val.len() as u32;
        let mut reply = Message::EvalResponse {
            round,
            client_id: self.cfg.client_id,
            num_examples: n,
            correct: (accuracy * n as f64).round() as u32,
            loss: loss as f32,
            metrics: Vec::new(),
        };
        let up = emulated_tx_duration(p, reply.encode().len() as u64, Direction::Uplink);
        let t_finish = self.window(Stage::Idle, eval_end, up);
        if let Message::EvalResponse { metrics, .. } = &mut reply {
            metrics.push((KEY_T_FINISH.into(), t_finish.to_string()));
            metrics.push((KEY_STAGE_S.into(), eval_s.to_string()));
        }
        Ok(reply)
    }

    fn serve(
        &mut self,
        stream: &mut Counted,
        summary: &mut ClientSummary,
    ) -> Result<(), ClientError> {
        write_message(
            stream,
            &Message::Hello {
                client_id: self.cfg.client_id,
                dev_type: self.cfg.dev_type.clone(),
            },
        )?;
        match read_message(stream)?.0 {
            Message::HelloAck { client_id, .. } if client_id == self.cfg.client_id => {}
            Message::Error { message } => return Err(ClientError::Server(message)),
            other => {
                return Err(ClientError::Protocol(format!(
                    "expected HelloAck, got {}",
                    other.name()
                )))
            }
        }
        loop {
            let (msg, frame_len) = match read_message(stream) {
                Ok(m) => m,
                Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => {
                    return Err(ClientError::Protocol("server closed the connection".into()))
                }
                Err(e) => return Err(e.into()),
            };
            let reply = match msg {
                Message::FitRequest {
                    round,
                    config,
                    params,
                } => {
                    summary.fits += 1;
                    self.fit(round, &config, params, frame_len)
                }
                Message::EvalRequest {
                    round,
                    config,
                    params,
                } => {
                    summary.evals += 1;
                    self.eval(round, &config, params, frame_len)
                }
                Message::Shutdown => return Ok(()),
                Message::Error { message } => return Err(ClientError::Server(message)),
                other => {
                    return Err(ClientError::Protocol(format!(
                        "unexpected {}",
                        other.name()
                    )))
                }
            };
            let reply = match reply {
                Ok(r) => r,
                Err(e) => {
                    let _ = write_message(
                        stream,
                        &Message::Error {
                            message: e.to_string(),
                        },
                    );
                    return Err(e);
                }
            };
            write_message(stream, &reply)?;
            self.clock.lock().unwrap().release(Instant::now());
        }
    }
}

/// Connects, registers and serves requests until the server shuts down.
pub fn client_run(cfg: ClientConfig) -> Result<ClientSummary, ClientError> {
    let socket = connect(&cfg)?;
    let net = Arc::new(NetCounters::default());
    let clock = Arc::new(Mutex::new(EmulatedClock::new(
        cfg.profile.time_scale,
        Instant::now(),
    )));
    let scraper = match &cfg.telemetry {
        Some(t) => {
            let segment = t
                .store
                .segment(&t.job_id, &format!("client-{:04}", cfg.client_id))?;
            let sensors =
                DeviceSensors::new(clock.clone(), cfg.profile.clone(), t.seed, net.clone());
            let scfg = ScraperConfig::new(
                t.scrape_interval_s,
                t.push_interval_s,
                cfg.profile.time_scale,
            );
            Some(ScraperHandle::spawn(scfg, sensors, segment, cfg.client_id)?)
        }
        None => None,
    };
    let mut session = Session {
        cfg,
        clock,
        scraper,
    };
    let mut stream = Counted { inner: socket, net };
    let mut summary = ClientSummary::default();
    let served = session.serve(&mut stream, &mut summary);
    if let Some(h) = session.scraper.take() {
        let stats = h.stop();
        match (&served, stats) {
            (_, Ok(s)) => summary.scraper = Some(s),
            (Ok(()), Err(e)) => return Err(e.into()),
            (Err(_), Err(e)) => log::warn!("telemetry lost: {e}"),
        }
    }
    served.map(|_| summary)
}
