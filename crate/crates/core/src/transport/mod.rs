//! Networked federation over TCP: a length-prefixed, checksummed binary
//! protocol, the aggregation server and the reactive client loop.

mod client;
mod server;
pub mod wire;

use thiserror::Error;

use crate::federation::FedError;
use crate::models::ModelError;

pub use client::{client_run, ClientOptions, ClientSummary, LocalResult};
pub use server::{serve, ServerConfig, ServerOutcome};
pub use wire::{decode, encode, read_message, Decoder, Message, PROTOCOL_VERSION};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message tag {0}")]
    UnknownTag(u8),
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    TooLarge { len: u64, max: u64 },
    #[error("frame checksum mismatch (expected {expected:08x}, computed {actual:08x})")]
    Checksum { expected: u32, actual: u32 },
    #[error("incomplete frame")]
    Incomplete,
    #[error("connection closed")]
    Closed,
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error(transparent)]
    Weights(#[from] ModelError),
    #[error("network: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("timeout: {0}")]
    Timeout(String),
    #[error("round {round} failed after {attempts} attempts: {reason}")]
    RoundFailed {
        round: usize,
        attempts: usize,
        reason: String,
    },
    #[error(transparent)]
    Federation(#[from] FedError),
}
