//! Frames and messages.
//!
//! A frame is `magic "FGWP" | version u8 | tag u8 | payload length u64 LE |
//! payload | CRC-32 u32 LE`, the CRC covering version, tag, length and
//! payload. Integers in payloads are little-endian; weight vectors are
//! embedded in their checkpoint encoding.

use std::io::Read;

use crate::models::ParamVector;

use super::TransportError;

pub const MAGIC: [u8; 4] = *b"FGWP";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 14;
pub const TRAILER_LEN: usize = 4;
/// Default upper bound on a payload, checked before any allocation.
pub const DEFAULT_MAX_PAYLOAD: u64 = 256 << 20;

const TAG_HELLO: u8 = 1;
const TAG_ROUND_START: u8 = 2;
const TAG_ROUND_DONE: u8 = 3;
const TAG_ABORT: u8 = 4;
const TAG_SHUTDOWN: u8 = 5;

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello {
        client_id: u32,
        protocol_version: u8,
    },
    RoundStart {
        round: u32,
        /// Retry counter within the round, from 1.
        attempt: u32,
        config_digest: [u8; 32],
        local_epochs: u32,
        global: ParamVector,
    },
    RoundDone {
        round: u32,
        attempt: u32,
        samples: u64,
        params: ParamVector,
        loss_d: f64,
        loss_g: f64,
    },
    Abort {
        reason: String,
    },
    Shutdown,
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::RoundStart { .. } => "round-start",
            Message::RoundDone { .. } => "round-done",
            Message::Abort { .. } => "abort",
            Message::Shutdown => "shutdown",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::RoundStart { .. } => TAG_ROUND_START,
            Message::RoundDone { .. } => TAG_ROUND_DONE,
            Message::Abort { .. } => TAG_ABORT,
            Message::Shutdown => TAG_SHUTDOWN,
        }
    }

    fn payload(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Message::Hello {
                client_id,
                protocol_version,
            } => {
                p.extend_from_slice(&client_id.to_le_bytes());
                p.push(*protocol_version);
            }
            Message::RoundStart {
                round,
                attempt,
                config_digest,
                local_epochs,
                global,
            } => {
                p.extend_from_slice(&round.to_le_bytes());
                p.extend_from_slice(&attempt.to_le_bytes());
                p.extend_from_slice(config_digest);
                p.extend_from_slice(&local_epochs.to_le_bytes());
                put_params(&mut p, global);
            }
            Message::RoundDone {
                round,
                attempt,
                samples,
                params,
                loss_d,
                loss_g,
            } => {
                p.extend_from_slice(&round.to_le_bytes());
                p.extend_from_slice(&attempt.to_le_bytes());
                p.extend_from_slice(&samples.to_le_bytes());
                p.extend_from_slice(&loss_d.to_le_bytes());
                p.extend_from_slice(&loss_g.to_le_bytes());
                put_params(&mut p, params);
            }
            Message::Abort { reason } => {
                p.extend_from_slice(&(reason.len() as u32).to_le_bytes());
                p.extend_from_slice(reason.as_bytes());
            }
            Message::Shutdown => {}
        }
        p
    }

    fn from_payload(tag: u8, payload: &[u8]) -> Result<Message, TransportError> {
        let mut r = Cursor { buf: payload, pos: 0 };
        let msg = match tag {
            TAG_HELLO => Message::Hello {
                client_id: r.u32()?,
                protocol_version: r.take(1)?[0],
            },
            TAG_ROUND_START => Message::RoundStart {
                round: r.u32()?,
                attempt: r.u32()?,
                config_digest: r.take(32)?.try_into().expect("32 bytes"),
                local_epochs: r.u32()?,
                global: r.params()?,
            },
            TAG_ROUND_DONE => Message::RoundDone {
                round: r.u32()?,
                attempt: r.u32()?,
                samples: r.u64()?,
                loss_d: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
                loss_g: f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes")),
                params: r.params()?,
            },
            TAG_ABORT => {
                let n = r.u32()? as usize;
                let bytes = r.take(n)?;
                Message::Abort {
                    reason: String::from_utf8(bytes.to_vec())
                        .map_err(|_| TransportError::Malformed("abort reason is not UTF-8".into()))?,
                }
            }
            TAG_SHUTDOWN => Message::Shutdown,
            other => return Err(TransportError::UnknownTag(other)),
        };
        if r.pos != payload.len() {
            return Err(TransportError::Malformed(format!(
                "{} trailing payload bytes in {}",
                payload.len() - r.pos,
                msg.kind()
            )));
        }
        Ok(msg)
    }
}

fn put_params(p: &mut Vec<u8>, pv: &ParamVector) {
    let bytes = pv.to_bytes();
    p.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
    p.extend_from_slice(&bytes);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TransportError> {
        if self.buf.len() - self.pos < n {
            return Err(TransportError::Malformed(format!(
                "payload truncated: need {n} bytes at offset {}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TransportError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, TransportError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn params(&mut self) -> Result<ParamVector, TransportError> {
        let n = self.u64()?;
        let n = usize::try_from(n).map_err(|_| TransportError::Malformed("weight block too large".into()))?;
        Ok(ParamVector::from_bytes(self.take(n)?)?)
    }
}

fn crc(header_tail: &[u8], payload: &[u8]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    h.update(header_tail);
    h.update(payload);
    h.finalize()
}

/// Encodes one message as a complete frame. Pure: equal messages give
/// equal bytes.
pub fn encode(msg: &Message) -> Vec<u8> {
    encode_with_version(msg, PROTOCOL_VERSION)
}

/// Like [`encode`] with an explicit version byte (for interoperability tests).
pub fn encode_with_version(msg: &Message, version: u8) -> Vec<u8> {
    let payload = msg.payload();
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(version);
    out.push(msg.tag());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    let sum = crc(&out[4..HEADER_LEN], &payload);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

struct Header {
    tag: u8,
    len: usize,
}

fn parse_header(h: &[u8], max_payload: u64) -> Result<Header, TransportError> {
    if h[..4] != MAGIC {
        return Err(TransportError::BadMagic(h[..4].try_into().expect("4 bytes")));
    }
    if h[4] != PROTOCOL_VERSION {
        return Err(TransportError::BadVersion(h[4]));
    }
    let len = u64::from_le_bytes(h[6..14].try_into().expect("8 bytes"));
    if len > max_payload {
        return Err(TransportError::TooLarge { len, max: max_payload });
    }
    Ok(Header {
        tag: h[5],
        len: len as usize,
    })
}

fn finish(header: &[u8], tag: u8, payload: &[u8], trailer: &[u8]) -> Result<Message, TransportError> {
    let expected = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
    let actual = crc(&header[4..HEADER_LEN], payload);
    if expected != actual {
        return Err(TransportError::Checksum { expected, actual });
    }
    Message::from_payload(tag, payload)
}

/// Decodes exactly one complete frame.
pub fn decode(bytes: &[u8]) -> Result<Message, TransportError> {
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(TransportError::Incomplete);
    }
    let h = parse_header(&bytes[..HEADER_LEN], DEFAULT_MAX_PAYLOAD)?;
    let total = HEADER_LEN + h.len + TRAILER_LEN;
    match bytes.len().cmp(&total) {
        std::cmp::Ordering::Less => Err(TransportError::Incomplete),
        std::cmp::Ordering::Greater => Err(TransportError::Malformed(format!(
            "{} bytes after the frame",
            bytes.len() - total
        ))),
        std::cmp::Ordering::Equal => finish(
            &bytes[..HEADER_LEN],
            h.tag,
            &bytes[HEADER_LEN..HEADER_LEN + h.len],
            &bytes[HEADER_LEN + h.len..],
        ),
    }
}

/// Incremental decoder: feed arbitrary chunks, take whole messages out.
/// Buffers at most one frame; an oversized length is rejected as soon as
/// its header is complete.
#[derive(Debug)]
pub struct Decoder {
    buf: Vec<u8>,
    max_payload: u64,
}

impl Default for Decoder {
    fn default() -> Self {
        Decoder::new(DEFAULT_MAX_PAYLOAD)
    }
}

impl Decoder {
    pub fn new(max_payload: u64) -> Self {
        Decoder {
            buf: Vec::new(),
            max_payload,
        }
    }

    /// Bytes held for a frame still in progress.
    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Consumes as much of `input` as belongs to the current frame and
    /// returns how many bytes were used and the message if it completed.
    pub fn feed(&mut self, input: &[u8]) -> Result<(usize, Option<Message>), TransportError> {
        let mut used = 0;
        if self.buf.len() < HEADER_LEN {
            let n = (HEADER_LEN - self.buf.len()).min(input.len());
            self.buf.extend_from_slice(&input[..n]);
            used += n;
            if self.buf.len() < HEADER_LEN {
                return Ok((used, None));
            }
        }
        let h = match parse_header(&self.buf[..HEADER_LEN], self.max_payload) {
            Ok(h) => h,
            Err(e) => {
                self.buf.clear();
                return Err(e);
            }
        };
        let total = HEADER_LEN + h.len + TRAILER_LEN;
        let n = (total - self.buf.len()).min(input.len() - used);
        self.buf.extend_from_slice(&input[used..used + n]);
        used += n;
        if self.buf.len() < total {
            return Ok((used, None));
        }
        let frame = std::mem::take(&mut self.buf);
        let msg = finish(
            &frame[..HEADER_LEN],
            h.tag,
            &frame[HEADER_LEN..HEADER_LEN + h.len],
            &frame[HEADER_LEN + h.len..],
        )?;
        Ok((used, Some(msg)))
    }

    /// Feeds all of `input`, returning every message completed by it.
    pub fn feed_all(&mut self, mut input: &[u8]) -> Result<Vec<Message>, TransportError> {
        let mut out = Vec::new();
        while !input.is_empty() {
            let (used, msg) = self.feed(input)?;
            out.extend(msg);
            input = &input[used..];
        }
        Ok(out)
    }
}

/// Blocking read of one frame. A clean end of stream before any byte of a
/// frame is reported as [`TransportError::Closed`].
pub fn read_message(r: &mut impl Read, max_payload: u64) -> Result<Message, TransportError> {
    let mut header = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(TransportError::Closed),
            Ok(0) => return Err(TransportError::Incomplete),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let h = parse_header(&header, max_payload)?;
    let mut rest = vec![0u8; h.len + TRAILER_LEN];
    r.read_exact(&mut rest).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TransportError::Incomplete,
        _ => e.into(),
    })?;
    finish(&header, h.tag, &rest[..h.len], &rest[h.len..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LayoutEntry;

    fn pv(n: usize) -> ParamVector {
        ParamVector::new(
            vec![LayoutEntry {
                name: "w".into(),
                shape: vec![n],
            }],
            (0..n).map(|i| (i as f64).sin()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn shutdown_is_bare_header() {
        let b = encode(&Message::Shutdown);
        assert_eq!(b.len(), HEADER_LEN + TRAILER_LEN);
        assert_eq!(decode(&b).unwrap(), Message::Shutdown);
    }

    #[test]
    fn round_done_thousand_params() {
        let m = Message::RoundDone {
            round: 2,
            attempt: 1,
            samples: 100,
            params: pv(1000),
            loss_d: 0.5,
            loss_g: -1.25,
        };
        let b = encode(&m);
        assert_eq!(decode(&b).unwrap(), m);
        assert_eq!(encode(&m), b);
    }

    #[test]
    fn flipped_payload_byte_detected() {
        let mut b = encode(&Message::Abort { reason: "stop".into() });
        b[HEADER_LEN + 5] ^= 0x40;
        assert!(matches!(decode(&b), Err(TransportError::Checksum { .. })));
    }

    #[test]
    fn oversized_length_rejected_before_buffering() {
        let mut b = encode(&Message::Shutdown);
        b[6..14].copy_from_slice(&u64::MAX.to_le_bytes());
        let mut d = Decoder::new(1024);
        assert!(matches!(d.feed(&b), Err(TransportError::TooLarge { .. })));
        assert_eq!(d.buffered(), 0);
    }

    #[test]
    fn byte_at_a_time() {
        let m = Message::Hello {
            client_id: 3,
            protocol_version: PROTOCOL_VERSION,
        };
        let b = encode(&m);
        let mut d = Decoder::default();
        let mut got = Vec::new();
        for byte in &b {
            got.extend(d.feed_all(std::slice::from_ref(byte)).unwrap());
            if got.is_empty() {
                assert!(d.buffered() > 0);
            }
        }
        assert_eq!(got, vec![m]);
        assert_eq!(d.buffered(), 0);
    }

    #[test]
    fn wrong_version_and_magic() {
        let b = encode_with_version(&Message::Shutdown, 9);
        assert!(matches!(decode(&b), Err(TransportError::BadVersion(9))));
        let mut b = encode(&Message::Shutdown);
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(TransportError::BadMagic(_))));
    }
}
