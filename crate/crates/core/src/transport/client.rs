use std::io::Write;
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::{Duration, Instant};

use crate::models::{hex, ParamVector};

use super::wire::{encode, read_message, Message, DEFAULT_MAX_PAYLOAD, PROTOCOL_VERSION};
use super::TransportError;

#[derive(Clone, Debug)]
pub struct ClientOptions {
    pub client_id: u32,
    pub config_digest: [u8; 32],
    /// Local training-set size reported with every update.
    pub samples: u64,
    /// How long to keep retrying the initial connection.
    pub connect_timeout: Duration,
    pub max_payload: u64,
}

impl ClientOptions {
    pub fn new(client_id: u32, config_digest: [u8; 32], samples: u64) -> Self {
        ClientOptions {
            client_id,
            config_digest,
            samples,
            connect_timeout: Duration::from_secs(60),
            max_payload: DEFAULT_MAX_PAYLOAD,
        }
    }
}

/// What a client's trainer returns for one round.
#[derive(Clone, Debug)]
pub struct LocalResult {
    pub params: ParamVector,
    pub loss_d: f64,
    pub loss_g: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ClientSummary {
    pub rounds_completed: usize,
    pub aborts_seen: usize,
}

fn connect(addr: &str, timeout: Duration) -> Result<TcpStream, TransportError> {
    let deadline = Instant::now() + timeout;
    loop {
        let attempt = addr
            .to_socket_addrs()
            .map_err(|e| TransportError::Protocol(format!("cannot resolve {addr}: {e}")))
            .and_then(|mut it| {
                it.next()
                    .ok_or_else(|| TransportError::Protocol(format!("{addr} resolves to no address")))
            })
            .and_then(|sa| TcpStream::connect(sa).map_err(TransportError::from));
        match attempt {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() >= deadline => {
                return Err(TransportError::Timeout(format!(
                    "could not reach server at {addr}: {e}"
                )))
            }
            Err(_) => thread::sleep(Duration::from_millis(100)),
        }
    }
}

/// Connects, says hello, then answers every `RoundStart` with the result of
/// `trainer(round, local_epochs, global)` until the server shuts down.
/// Only weights, the sample count and losses are ever sent.
pub fn client_run(
    addr: &str,
    opts: &ClientOptions,
    trainer: &mut dyn FnMut(usize, usize, &ParamVector) -> Result<LocalResult, String>,
) -> Result<ClientSummary, TransportError> {
    let mut stream = connect(addr, opts.connect_timeout)?;
    let _ = stream.set_nodelay(true);
    let mut reader = stream.try_clone()?;
    stream.write_all(&encode(&Message::Hello {
        client_id: opts.client_id,
        protocol_version: PROTOCOL_VERSION,
    }))?;
    log::info!("client {} connected to {addr}", opts.client_id);
    let mut summary = ClientSummary::default();
    let mut last_abort: Option<String> = None;
    loop {
        let msg = match read_message(&mut reader, opts.max_payload) {
            Ok(m) => m,
            Err(TransportError::Closed) => {
                return Err(TransportError::Protocol(match last_abort {
                    Some(r) => format!("server closed the connection after abort: {r}"),
                    None => "server closed the connection".into(),
                }))
            }
            Err(e) => return Err(e),
        };
        match msg {
            Message::RoundStart {
                round,
                attempt,
                config_digest,
                local_epochs,
                global,
            } => {
                if config_digest != opts.config_digest {
                    let reason = format!(
                        "config digest mismatch: server {} client {}",
                        &hex(&config_digest)[..12],
                        &hex(&opts.config_digest)[..12]
                    );
                    let _ = stream.write_all(&encode(&Message::Abort { reason: reason.clone() }));
                    return Err(TransportError::Protocol(reason));
                }
                log::info!("client {}: round {round} attempt {attempt}", opts.client_id);
                let done = match trainer(round as usize, local_epochs as usize, &global) {
                    Ok(r) => Message::RoundDone {
                        round,
                        attempt,
                        samples: opts.samples,
                        params: r.params,
                        loss_d: r.loss_d,
                        loss_g: r.loss_g,
                    },
                    Err(reason) => {
                        log::error!("client {}: local training failed: {reason}", opts.client_id);
                        Message::Abort { reason }
                    }
                };
                stream.write_all(&encode(&done))?;
                if matches!(done, Message::RoundDone { .. }) {
                    summary.rounds_completed += 1;
                }
            }
            Message::Abort { reason } => {
                log::warn!("client {}: server aborted: {reason}", opts.client_id);
                summary.aborts_seen += 1;
                last_abort = Some(reason);
            }
            Message::Shutdown => {
                log::info!(
                    "client {}: shutdown after {} rounds",
                    opts.client_id,
                    summary.rounds_completed
                );
                return Ok(summary);
            }
            other => {
                return Err(TransportError::Protocol(format!(
                    "server sent unexpected {}",
                    other.kind()
                )))
            }
        }
    }
}
