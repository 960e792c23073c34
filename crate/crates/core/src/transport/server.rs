//! Aggregation server: one reader thread per connection feeding a single
//! coordinator over a channel. The coordinator alone owns round state and
//! the write halves of the sockets.

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::federation::{sample_clients, write_audit_line, ClientUpdate, FedConfig, RoundAudit, RoundResult};
use crate::models::{hex, ParamVector};

use super::wire::{encode, read_message, Message, DEFAULT_MAX_PAYLOAD, PROTOCOL_VERSION};
use super::TransportError;

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub fed: FedConfig,
    pub config_digest: [u8; 32],
    /// How long to wait for every client's first Hello.
    pub startup_timeout: Duration,
    /// How long a sampled client may stay disconnected before a retry.
    pub reconnect_timeout: Duration,
    /// Round deadline before any round has completed.
    pub first_round_timeout: Duration,
    /// Lower bound on the adaptive deadline of 10× the median round time.
    pub round_timeout_floor: Duration,
    /// Retries after the first attempt of a round.
    pub max_retries: usize,
    pub max_payload: u64,
}

impl ServerConfig {
    pub fn new(fed: FedConfig, config_digest: [u8; 32]) -> Self {
        ServerConfig {
            fed,
            config_digest,
            startup_timeout: Duration::from_secs(120),
            reconnect_timeout: Duration::from_secs(120),
            first_round_timeout: Duration::from_secs(3600),
            round_timeout_floor: Duration::from_secs(30),
            max_retries: 2,
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }

    /// `max(floor, 10 × median)` over completed round durations.
    pub fn round_timeout(&self, completed: &[Duration]) -> Duration {
        if completed.is_empty() {
            return self.first_round_timeout.max(self.round_timeout_floor);
        }
        let mut d = completed.to_vec();
        d.sort();
        let n = d.len();
        let median = if n % 2 == 1 {
            d[n / 2]
        } else {
            (d[n / 2 - 1] + d[n / 2]) / 2
        };
        (median * 10).max(self.round_timeout_floor)
    }
}

#[derive(Clone, Debug)]
pub struct ServerOutcome {
    pub final_params: ParamVector,
    pub rounds: Vec<RoundResult>,
}

/// What the coordinator's round logic sees of an event.
enum Routed {
    /// A message from a registered client.
    Message(usize, Message),
    /// A registered client's connection closed.
    Lost(usize),
}

enum Event {
    Connected(usize, TcpStream),
    Message(usize, Message),
    Closed(usize, String),
}

#[derive(Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
enum AuditEvent<'a> {
    Listening {
        address: String,
        expected_clients: usize,
    },
    Hello {
        client: usize,
        connection: usize,
    },
    Rejected {
        connection: usize,
        reason: &'a str,
    },
    Disconnected {
        client: usize,
        reason: &'a str,
    },
    RoundStart {
        round: usize,
        attempt: usize,
        sampled: &'a [usize],
        global_checksum: String,
    },
    Abort {
        round: usize,
        attempt: usize,
        reason: &'a str,
    },
    RoundDone(&'a RoundAudit),
    Shutdown {
        rounds: usize,
        final_checksum: String,
    },
    Failed {
        reason: &'a str,
    },
}

struct Conn {
    writer: TcpStream,
    client: Option<usize>,
}

struct Coordinator<'a, W: Write> {
    cfg: &'a ServerConfig,
    rx: Receiver<Event>,
    conns: BTreeMap<usize, Conn>,
    /// Client id → live connection id.
    clients: BTreeMap<usize, usize>,
    audit: &'a mut W,
}

enum AttemptEnd {
    Done(Vec<ClientUpdate>),
    Failed(String),
}

impl<W: Write> Coordinator<'_, W> {
    fn log(&mut self, e: &AuditEvent) -> Result<(), TransportError> {
        write_audit_line(self.audit, e)?;
        Ok(())
    }

    fn send(&mut self, conn: usize, msg: &Message) -> Result<(), String> {
        let c = self.conns.get_mut(&conn).ok_or("connection gone")?;
        c.writer.write_all(&encode(msg)).map_err(|e| e.to_string())
    }

    fn drop_conn(&mut self, conn: usize) {
        if let Some(c) = self.conns.remove(&conn) {
            let _ = c.writer.shutdown(Shutdown::Both);
            if let Some(id) = c.client {
                if self.clients.get(&id) == Some(&conn) {
                    self.clients.remove(&id);
                }
            }
        }
    }

    /// Handles connection bookkeeping and passes on what a round cares about.
    fn handle(&mut self, ev: Event) -> Result<Option<Routed>, TransportError> {
        match ev {
            Event::Connected(conn, writer) => {
                self.conns.insert(conn, Conn { writer, client: None });
                Ok(None)
            }
            Event::Closed(conn, reason) => {
                let client = self.conns.get(&conn).and_then(|c| c.client);
                let live = client.is_some_and(|id| self.clients.get(&id) == Some(&conn));
                self.drop_conn(conn);
                match client {
                    Some(id) if live => {
                        log::warn!("client {id} disconnected: {reason}");
                        self.log(&AuditEvent::Disconnected {
                            client: id,
                            reason: &reason,
                        })?;
                        Ok(Some(Routed::Lost(id)))
                    }
                    _ => Ok(None),
                }
            }
            Event::Message(
                conn,
                Message::Hello {
                    client_id,
                    protocol_version,
                },
            ) => {
                let id = client_id as usize;
                let problem = if protocol_version != PROTOCOL_VERSION {
                    Some(format!(
                        "protocol version {protocol_version} unsupported (server speaks {PROTOCOL_VERSION})"
                    ))
                } else if id >= self.cfg.fed.num_clients {
                    Some(format!(
                        "client id {id} out of range for {} clients",
                        self.cfg.fed.num_clients
                    ))
                } else if self.conns.get(&conn).is_some_and(|c| c.client.is_some()) {
                    Some("duplicate hello".to_string())
                } else {
                    None
                };
                if let Some(reason) = problem {
                    log::warn!("rejecting connection {conn}: {reason}");
                    self.log(&AuditEvent::Rejected {
                        connection: conn,
                        reason: &reason,
                    })?;
                    let _ = self.send(conn, &Message::Abort { reason });
                    self.drop_conn(conn);
                    return Ok(None);
                }
                if let Some(old) = self.clients.insert(id, conn) {
                    log::info!("client {id} reconnected; dropping connection {old}");
                    if let Some(c) = self.conns.get_mut(&old) {
                        c.client = None;
                    }
                    self.drop_conn(old);
                }
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.client = Some(id);
                }
                log::info!("client {id} connected");
                self.log(&AuditEvent::Hello {
                    client: id,
                    connection: conn,
                })?;
                Ok(None)
            }
            Event::Message(conn, msg) => match self.conns.get(&conn).and_then(|c| c.client) {
                Some(id) => Ok(Some(Routed::Message(id, msg))),
                None => {
                    let reason = format!("{} before hello", msg.kind());
                    self.log(&AuditEvent::Rejected {
                        connection: conn,
                        reason: &reason,
                    })?;
                    let _ = self.send(conn, &Message::Abort { reason });
                    self.drop_conn(conn);
                    Ok(None)
                }
            },
        }
    }

    fn wait_for(&mut self, wanted: &[usize], timeout: Duration, phase: &str) -> Result<(), TransportError> {
        let deadline = Instant::now() + timeout;
        loop {
            let missing: Vec<usize> = wanted
                .iter()
                .copied()
                .filter(|c| !self.clients.contains_key(c))
                .collect();
            if missing.is_empty() {
                return Ok(());
            }
            let left = deadline.saturating_duration_since(Instant::now());
            match self.rx.recv_timeout(left) {
                Ok(ev) => {
                    if let Some(Routed::Message(id, msg)) = self.handle(ev)? {
                        log::warn!("ignoring {} from client {id} while {phase}", msg.kind());
                    }
                }
                Err(RecvTimeoutError::Timeout) => {
                    return Err(TransportError::Timeout(format!(
                        "{phase}: clients {missing:?} did not connect within {timeout:?}"
                    )))
                }
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Protocol("listener stopped".into())),
            }
        }
    }

    fn attempt(
        &mut self,
        round: usize,
        attempt: usize,
        sampled: &[usize],
        global: &ParamVector,
        timeout: Duration,
    ) -> Result<AttemptEnd, TransportError> {
        let start = Message::RoundStart {
            round: round as u32,
            attempt: attempt as u32,
            config_digest: self.cfg.config_digest,
            local_epochs: self.cfg.fed.local_epochs as u32,
            global: global.clone(),
        };
        self.log(&AuditEvent::RoundStart {
            round,
            attempt,
            sampled,
            global_checksum: global.checksum_hex(),
        })?;
        for &c in sampled {
            let conn = self.clients[&c];
            if let Err(e) = self.send(conn, &start) {
                return Ok(AttemptEnd::Failed(format!("sending to client {c}: {e}")));
            }
        }
        let deadline = Instant::now() + timeout;
        let mut updates: BTreeMap<usize, ClientUpdate> = BTreeMap::new();
        while updates.len() < sampled.len() {
            let left = deadline.saturating_duration_since(Instant::now());
            let ev = match self.rx.recv_timeout(left) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => {
                    let waiting: Vec<usize> = sampled.iter().copied().filter(|c| !updates.contains_key(c)).collect();
                    return Ok(AttemptEnd::Failed(format!(
                        "timed out after {timeout:?} waiting for clients {waiting:?}"
                    )));
                }
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Protocol("listener stopped".into())),
            };
            match self.handle(ev)? {
                None => {}
                Some(Routed::Lost(id)) if sampled.contains(&id) && !updates.contains_key(&id) => {
                    return Ok(AttemptEnd::Failed(format!("client {id} disconnected")));
                }
                Some(Routed::Lost(_)) => {}
                Some(Routed::Message(id, msg)) => match msg {
                    Message::RoundDone {
                        round: r,
                        attempt: a,
                        samples,
                        params,
                        loss_d,
                        loss_g,
                    } if r as usize == round && a as usize == attempt && sampled.contains(&id) => {
                        if params.layout() != global.layout() {
                            return Ok(AttemptEnd::Failed(format!("client {id} returned a different layout")));
                        }
                        updates.insert(
                            id,
                            ClientUpdate {
                                client: id,
                                samples: samples as usize,
                                params,
                                loss_d,
                                loss_g,
                            },
                        );
                    }
                    Message::RoundDone {
                        round: r, attempt: a, ..
                    } => {
                        log::warn!("ignoring stale round-done ({r}/{a}) from client {id}");
                    }
                    Message::Abort { reason } => {
                        return Ok(AttemptEnd::Failed(format!("client {id} aborted: {reason}")));
                    }
                    other => {
                        return Ok(AttemptEnd::Failed(format!(
                            "client {id} sent unexpected {}",
                            other.kind()
                        )));
                    }
                },
            }
        }
        Ok(AttemptEnd::Done(updates.into_values().collect()))
    }

    fn broadcast(&mut self, targets: &[usize], msg: &Message) {
        for c in targets {
            if let Some(&conn) = self.clients.get(c) {
                let _ = self.send(conn, msg);
            }
        }
    }

    fn run(&mut self, initial: &ParamVector) -> Result<ServerOutcome, TransportError> {
        let fed = self.cfg.fed.clone();
        let all: Vec<usize> = (0..fed.num_clients).collect();
        self.wait_for(&all, self.cfg.startup_timeout, "starting up")?;
        let mut global = initial.clone();
        let mut rounds = Vec::with_capacity(fed.rounds);
        let mut durations = Vec::new();
        for round in 1..=fed.rounds {
            let sampled = sample_clients(fed.num_clients, fed.client_fraction, fed.seed, round)?;
            let mut attempt = 0;
            let result = loop {
                attempt += 1;
                self.wait_for(
                    &sampled,
                    self.cfg.reconnect_timeout,
                    &format!("preparing round {round}"),
                )?;
                let began = Instant::now();
                let timeout = self.cfg.round_timeout(&durations);
                match self.attempt(round, attempt, &sampled, &global, timeout)? {
                    AttemptEnd::Done(updates) => {
                        durations.push(began.elapsed());
                        let mut r = RoundResult::assemble(round, sampled.clone(), updates)?;
                        r.attempts = attempt;
                        break r;
                    }
                    AttemptEnd::Failed(reason) => {
                        log::warn!("round {round} attempt {attempt} aborted: {reason}");
                        self.log(&AuditEvent::Abort {
                            round,
                            attempt,
                            reason: &reason,
                        })?;
                        self.broadcast(&sampled, &Message::Abort { reason: reason.clone() });
                        if attempt > self.cfg.max_retries {
                            return Err(TransportError::RoundFailed {
                                round,
                                attempts: attempt,
                                reason,
                            });
                        }
                    }
                }
            };
            self.log(&AuditEvent::RoundDone(&result.audit()))?;
            log::info!(
                "round {round}/{} aggregated ({})",
                fed.rounds,
                &result.aggregate.checksum_hex()[..12]
            );
            global = result.aggregate.clone();
            rounds.push(result);
        }
        self.log(&AuditEvent::Shutdown {
            rounds: rounds.len(),
            final_checksum: global.checksum_hex(),
        })?;
        self.broadcast(&all, &Message::Shutdown);
        Ok(ServerOutcome {
            final_params: global,
            rounds,
        })
    }
}

fn spawn_acceptor(
    listener: TcpListener,
    tx: Sender<Event>,
    stop: Arc<AtomicBool>,
    max_payload: u64,
) -> std::io::Result<()> {
    listener.set_nonblocking(true)?;
    thread::spawn(move || {
        let mut next = 0usize;
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let conn = next;
                    next += 1;
                    log::debug!("connection {conn} from {peer}");
                    let reader = stream.set_nonblocking(false).and_then(|_| stream.try_clone());
                    let mut reader = match reader {
                        Ok(r) => r,
                        Err(e) => {
                            log::warn!("connection {conn}: {e}");
                            continue;
                        }
                    };
                    let _ = stream.set_nodelay(true);
                    if tx.send(Event::Connected(conn, stream)).is_err() {
                        return;
                    }
                    let tx = tx.clone();
                    thread::spawn(move || loop {
                        match read_message(&mut reader, max_payload) {
                            Ok(m) => {
                                if tx.send(Event::Message(conn, m)).is_err() {
                                    return;
                                }
                            }
                            Err(e) => {
                                let _ = tx.send(Event::Closed(conn, e.to_string()));
                                return;
                            }
                        }
                    });
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    log::warn!("accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
        }
    });
    Ok(())
}

/// Runs the whole federation over `listener`, starting from `initial`, and
/// appends one JSON line per event to `audit`.
pub fn serve<W: Write>(
    listener: TcpListener,
    cfg: &ServerConfig,
    initial: &ParamVector,
    audit: &mut W,
) -> Result<ServerOutcome, TransportError> {
    cfg.fed.validate()?;
    let address = listener.local_addr()?.to_string();
    write_audit_line(
        audit,
        &AuditEvent::Listening {
            address: address.clone(),
            expected_clients: cfg.fed.num_clients,
        },
    )?;
    log::info!(
        "listening on {address} for {} clients (config {})",
        cfg.fed.num_clients,
        &hex(&cfg.config_digest)[..12]
    );
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    spawn_acceptor(listener, tx, stop.clone(), cfg.max_payload)?;
    let mut coord = Coordinator {
        cfg,
        rx,
        conns: BTreeMap::new(),
        clients: BTreeMap::new(),
        audit,
    };
    let result = coord.run(initial);
    if let Err(e) = &result {
        let reason = e.to_string();
        let _ = coord.log(&AuditEvent::Failed { reason: &reason });
        let all: Vec<usize> = coord.clients.keys().copied().collect();
        coord.broadcast(&all, &Message::Abort { reason });
    }
    stop.store(true, Ordering::Relaxed);
    let conns: Vec<usize> = coord.conns.keys().copied().collect();
    for c in conns {
        if let Some(conn) = coord.conns.get(&c) {
            let _ = conn.writer.shutdown(Shutdown::Write);
        }
    }
    result
}
