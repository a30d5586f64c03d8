//! Synchronous round loop.
//!
//! Emulated time is advanced by the server from what clients report: each
//! request carries the emulated instant its phase starts (`t_start`) and each
//! response the instant the client finished (`t_finish`). Wall-clock waiting
//! is only used to collect responses; round records contain emulated times.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, BufReader};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::wire::{kv_parse, read_message, write_message, KeyValues, Message, WireError};
use crate::metrics::records::Record;
use crate::metrics::store::MetricSink;
use crate::model::{init_model, ModelSpec, ParamVector, TrainConfig, WidthRatio};
use crate::strategy::{
    aggregate_fedavg, aggregate_round_metrics, heterofl_aggregate, heterofl_extract,
    sample_clients, should_stop, split_on_time, Algorithm, ClientEval, ClientUpdate, RoundRecord,
    StrategyConfig, StrategyError,
};

pub const KEY_T_START: &str = "t_start";
pub const KEY_T_FINISH: &str = "t_finish";
pub const KEY_STAGE_S: &str = "stage_s";

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("invalid server config: {0}")]
    Config(String),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: io::Error,
    },
    #[error("registration: {0}")]
    Registration(String),
    #[error("client {client_id} lost in round {round}: {reason}")]
    ClientLost {
        client_id: u32,
        round: u32,
        reason: String,
    },
    #[error("client {client_id} reported an error: {message}")]
    ClientFailed { client_id: u32, message: String },
    #[error("protocol violation by client {client_id}: {reason}")]
    Protocol { client_id: u32, reason: String },
    #[error("timed out after {0:?} waiting for clients")]
    Timeout(Duration),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("writing round record: {0}")]
    Sink(io::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub n_clients: u32,
    pub strategy: StrategyConfig,
    pub spec: ModelSpec,
    /// Local epochs, batch size and learning rate sent to clients. Its `mu`
    /// and `seed` are replaced by the strategy's.
    pub train: TrainConfig,
    /// HeteroFL width per device type; missing types train the full model.
    pub width_ratios: BTreeMap<String, WidthRatio>,
    pub init_seed: u64,
    /// Longest wall-clock wait for registration or a round's responses.
    pub io_timeout: Duration,
}

/// Wall-clock durations of one round, for checking throttling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundWall {
    pub round: u32,
    pub fit_s: f64,
    pub round_s: f64,
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub final_params: ParamVector,
    pub history: Vec<RoundRecord>,
    pub wall: Vec<RoundWall>,
}

struct Conn {
    writer: TcpStream,
    width_ratio: WidthRatio,
}

enum Inbound {
    Msg(u32, Message),
    Lost(u32, String),
}

pub struct Server {
    listener: TcpListener,
    cfg: ServerConfig,
}

impl Server {
    pub fn bind(addr: &str, cfg: ServerConfig) -> Result<Self, ServerError> {
        if cfg.n_clients == 0 {
            return Err(ServerError::Config("n_clients must be >= 1".into()));
        }
        cfg.strategy
            .validate(cfg.n_clients as usize)
            .map_err(|e| ServerError::Config(e.to_string()))?;
        cfg.spec
            .validate()
            .map_err(|e| ServerError::Config(e.to_string()))?;
        cfg.train
            .validate()
            .map_err(|e| ServerError::Config(e.to_string()))?;
        let listener = TcpListener::bind(addr).map_err(|source| ServerError::Bind {
            addr: addr.to_string(),
            source,
        })?;
        Ok(Server { listener, cfg })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Runs registration and every round, then shuts clients down. Round
    /// records are also pushed to `sink` as they complete.
    pub fn run(self, mut sink: Option<&mut dyn MetricSink>) -> Result<ServerOutcome, ServerError> {
        let (tx, rx) = mpsc::channel();
        let mut conns = self.register(&tx)?;
        let result = RoundLoop {
            cfg: &self.cfg,
            rx: &rx,
            conns: &mut conns,
        }
        .run(&mut sink);
        let farewell = match &result {
            Ok(_) => Message::Shutdown,
            Err(e) => Message::Error {
                message: e.to_string(),
            },
        };
        for c in conns.values_mut() {
            let _ = write_message(&mut c.writer, &farewell);
        }
        result
    }

    fn register(&self, tx: &Sender<Inbound>) -> Result<BTreeMap<u32, Conn>, ServerError> {
        let n = self.cfg.n_clients;
        let deadline = Instant::now() + self.cfg.io_timeout;
        // acceptor thread hands over connections that sent a Hello
        let listener = self.listener.try_clone()?;
        let (ctx, crx) = mpsc::channel::<(TcpStream, u32, String)>();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let ctx = ctx.clone();
                thread::spawn(move || {
                    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
                    if let Ok((
                        Message::Hello {
                            client_id,
                            dev_type,
                        },
                        _,
                    )) = read_message(&mut stream)
                    {
                        let _ = stream.set_read_timeout(None);
                        let _ = ctx.send((stream, client_id, dev_type));
                    }
                });
            }
        });
        let mut conns = BTreeMap::new();
        while conns.len() < n as usize {
            let left = deadline.saturating_duration_since(Instant::now());
            let (mut stream, id, dev_type) = match crx.recv_timeout(left) {
                Ok(v) => v,
                Err(_) => {
                    return Err(ServerError::Registration(format!(
                        "only {} of {n} clients registered within {:?}",
                        conns.len(),
                        self.cfg.io_timeout
                    )))
                }
            };
            let reject = if id >= n {
                Some(format!("client id {id} out of range [0, {n})"))
            } else if conns.contains_key(&id) {
                Some(format!("duplicate client id {id}"))
            } else {
                None
            };
            if let Some(reason) = reject {
                let _ = write_message(
                    &mut stream,
                    &Message::Error {
                        message: reason.clone(),
                    },
                );
                return Err(ServerError::Registration(reason));
            }
            stream.set_nodelay(true)?;
            write_message(
                &mut stream,
                &Message::HelloAck {
                    client_id: id,
                    n_clients: n,
                },
            )
            .map_err(|e| ServerError::Registration(format!("client {id}: {e}")))?;
            let reader = stream.try_clone()?;
            let tx = tx.clone();
            thread::spawn(move || reader_loop(id, reader, tx));
            let width_ratio = self
                .cfg
                .width_ratios
                .get(&dev_type)
                .copied()
                .unwrap_or(WidthRatio::FULL);
            log::info!("client {id} registered ({dev_type}, width {width_ratio})");
            conns.insert(
                id,
                Conn {
                    writer: stream,
                    width_ratio,
                },
            );
        }
        Ok(conns)
    }
}

fn reader_loop(id: u32, stream: TcpStream, tx: Sender<Inbound>) {
    let mut reader = BufReader::new(stream);
    loop {
        match read_message(&mut reader) {
            Ok((msg, _)) => {
                if tx.send(Inbound::Msg(id, msg)).is_err() {
                    return;
                }
            }
            Err(e) => {
                let reason = match &e {
                    WireError::Io(io) if io.kind() == io::ErrorKind::UnexpectedEof => {
                        "connection closed".to_string()
                    }
                    _ => e.to_string(),
                };
                let _ = tx.send(Inbound::Lost(id, reason));
                return;
            }
        }
    }
}

struct RoundLoop<'a> {
    cfg: &'a ServerConfig,
    rx: &'a Receiver<Inbound>,
    conns: &'a mut BTreeMap<u32, Conn>,
}

struct Reply {
    msg: Message,
    t_finish: f64,
    stage_s: f64,
}

impl RoundLoop<'_> {
    fn send(&mut self, id: u32, round: u32, msg: &Message) -> Result<(), ServerError> {
        let conn = self.conns.get_mut(&id).expect("registered");
        write_message(&mut conn.writer, msg).map_err(|e| ServerError::ClientLost {
            client_id: id,
            round,
            reason: e.to_string(),
        })?;
        Ok(())
    }

    /// Collects exactly one reply of the expected kind from each of `from`.
    fn collect(
        &self,
        round: u32,
        from: &BTreeSet<u32>,
        fit: bool,
    ) -> Result<BTreeMap<u32, Reply>, ServerError> {
        let deadline = Instant::now() + self.cfg.io_timeout;
        let mut got = BTreeMap::new();
        while got.len() < from.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let (id, msg) = match self.rx.recv_timeout(left) {
                Ok(Inbound::Msg(id, msg)) => (id, msg),
                Ok(Inbound::Lost(client_id, reason)) => {
                    return Err(ServerError::ClientLost {
                        client_id,
                        round,
                        reason,
                    })
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(ServerError::Timeout(self.cfg.io_timeout))
                }
                Err(RecvTimeoutError::Disconnected) => unreachable!("server holds a sender"),
            };
            let violation = |reason: String| ServerError::Protocol {
                client_id: id,
                reason,
            };
            let (echo_round, echo_id, metrics) = match (&msg, fit) {
                (
                    Message::FitResponse {
                        round,
                        client_id,
                        metrics,
                        ..
                    },
                    true,
                ) => (*round, *client_id, metrics),
                (
                    Message::EvalResponse {
                        round,
                        client_id,
                        metrics,
                        ..
                    },
                    false,
                ) => (*round, *client_id, metrics),
                (Message::Error { message }, _) => {
                    return Err(ServerError::ClientFailed {
                        client_id: id,
                        message: message.clone(),
                    })
                }
                (other, _) => {
                    return Err(violation(format!(
                        "unexpected {} in round {round}",
                        other.name()
                    )))
                }
            };
            if echo_round != round {
                return Err(violation(format!(
                    "reply for round {echo_round} during round {round}"
                )));
            }
            if echo_id != id {
                return Err(violation(format!("reply claims client id {echo_id}")));
            }
            if !from.contains(&id) || got.contains_key(&id) {
                return Err(violation(format!(
                    "unsolicited {} in round {round}",
                    msg.name()
                )));
            }
            let t_finish: f64 =
                kv_parse(metrics, KEY_T_FINISH).map_err(|e| violation(e.to_string()))?;
            let stage_s: f64 =
                kv_parse(metrics, KEY_STAGE_S).map_err(|e| violation(e.to_string()))?;
            got.insert(
                id,
                Reply {
                    msg,
                    t_finish,
                    stage_s,
                },
            );
        }
        Ok(got)
    }

    fn fit_config(&self, round: u32, t_start: f64) -> KeyValues {
        let t = &self.cfg.train;
        vec![
            (KEY_T_START.into(), t_start.to_string()),
            ("epochs".into(), t.local_epochs.to_string()),
            ("batch_size".into(), t.batch_size.to_string()),
            ("lr".into(), t.learning_rate.to_string()),
            ("mu".into(), self.cfg.strategy.client_mu().to_string()),
            ("seed".into(), self.cfg.strategy.seed.to_string()),
            ("round".into(), round.to_string()),
        ]
    }

    fn run(mut self, sink: &mut Option<&mut dyn MetricSink>) -> Result<ServerOutcome, ServerError> {
        let cfg = self.cfg;
        let all_ids: Vec<u32> = self.conns.keys().copied().collect();
        let mut global = init_model(&cfg.spec, cfg.init_seed);
        let mut history: Vec<RoundRecord> = Vec::new();
        let mut wall = Vec::new();
        let mut t_start = 0.0f64;
        let mut round = 0u32;
        while !should_stop(&history, &cfg.strategy) {
            let wall_start = Instant::now();
            let sampled = sample_clients(
                &all_ids,
                cfg.strategy.fraction_fit,
                cfg.strategy.seed,
                round,
            );
            let config = self.fit_config(round, t_start);
            for &id in &sampled {
                let params = match cfg.strategy.algorithm {
                    Algorithm::HeteroFl => {
                        heterofl_extract(&global, &cfg.spec, self.conns[&id].width_ratio)?
                    }
                    _ => global.clone(),
                };
                let msg = Message::FitRequest {
                    round,
                    config: config.clone(),
                    params,
                };
                self.send(id, round, &msg)?;
            }
            let replies = self.collect(round, &sampled.iter().copied().collect(), true)?;
            let fit_wall = wall_start.elapsed().as_secs_f64();

            let mut fit_durations = BTreeMap::new();
            let mut arrivals = Vec::new();
            for (id, reply) in replies {
                fit_durations.insert(id, reply.stage_s);
                let Message::FitResponse {
                    num_examples,
                    train_loss,
                    params,
                    ..
                } = reply.msg
                else {
                    unreachable!()
                };
                let update = ClientUpdate {
                    client_id: id,
                    params,
                    num_examples: num_examples as u64,
                    width_ratio: self.conns[&id].width_ratio,
                    train_loss: train_loss as f64,
                    val_accuracy: None,
                };
                arrivals.push((update, reply.t_finish));
            }
            let latest = arrivals.iter().map(|a| a.1).fold(t_start, f64::max);
            let (on_time, late) =
                split_on_time(arrivals, round, t_start, cfg.strategy.round_deadline_s)?;
            let fit_end = match cfg.strategy.round_deadline_s {
                Some(d) if !late.is_empty() => t_start + d,
                _ => latest,
            };
            if !late.is_empty() {
                log::warn!(
                    "round {round}: dropping {} late update(s) from {:?}",
                    late.len(),
                    late.iter().map(|u| u.client_id).collect::<Vec<_>>()
                );
            }
            global = match cfg.strategy.algorithm {
                Algorithm::HeteroFl => heterofl_aggregate(&on_time, &global, &cfg.spec)?,
                _ => aggregate_fedavg(&on_time)?,
            };

            let eval_config = vec![
                (KEY_T_START.to_string(), fit_end.to_string()),
                ("round".into(), round.to_string()),
            ];
            let eval_msg = Message::EvalRequest {
                round,
                config: eval_config,
                params: global.clone(),
            };
            for &id in &all_ids {
                self.send(id, round, &eval_msg)?;
            }
            let evals = self.collect(round, &all_ids.iter().copied().collect(), false)?;
            let mut eval_durations = BTreeMap::new();
            let mut reports = Vec::new();
            let mut round_end = fit_end;
            for (id, reply) in evals {
                eval_durations.insert(id, reply.stage_s);
                round_end = round_end.max(reply.t_finish);
                let Message::EvalResponse {
                    num_examples,
                    correct,
                    loss,
                    ..
                } = reply.msg
                else {
                    unreachable!()
                };
                if num_examples == 0 || correct > num_examples {
                    return Err(ServerError::Protocol {
                        client_id: id,
                        reason: format!("eval reports {correct} correct of {num_examples}"),
                    });
                }
                reports.push(ClientEval {
                    client_id: id,
                    num_examples: num_examples as u64,
                    loss: loss as f64,
                    accuracy: correct as f64 / num_examples as f64,
                });
            }
            let record = RoundRecord {
                round,
                aggregated_clients: on_time.iter().map(|u| u.client_id).collect(),
                sampled_clients: sampled,
                round_start_s: t_start,
                fit_end_s: fit_end,
                round_end_s: round_end,
                mean_val_accuracy: aggregate_round_metrics(&reports)?,
                fit_durations_s: fit_durations,
                eval_durations_s: eval_durations,
            };
            log::info!(
                "round {round}: acc {:.4}, emulated [{:.3}, {:.3}) s",
                record.mean_val_accuracy,
                record.round_start_s,
                record.round_end_s
            );
            if let Some(s) = sink.as_mut() {
                s.push(&[Record::Round(record.clone())])
                    .map_err(ServerError::Sink)?;
            }
            wall.push(RoundWall {
                round,
                fit_s: fit_wall,
                round_s: wall_start.elapsed().as_secs_f64(),
            });
            history.push(record);
            t_start = round_end;
            round += 1;
        }
        Ok(ServerOutcome {
            final_params: global,
            history,
            wall,
        })
    }
}
