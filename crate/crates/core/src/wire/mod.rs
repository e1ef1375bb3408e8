//! Framed binary protocol.
//!
//! Every message travels inside a self-delimiting frame:
//!
//! ```text
//! +--------+----------+---------+-------------+---------+
//! | magic  | msg_type |   seq   | payload_len | payload |
//! | 4 B BE |   1 B    | 8 B BE  |   4 B BE    |  N B    |
//! +--------+----------+---------+-------------+---------+
//! ```
//!
//! The magic is `0x42424D31` ("BBM1"). See `PROTOCOL.md` at the repository
//! root for the per-message payload layouts.

mod codec;
mod message;

use std::fmt;
use std::io::{self, Read, Write};

use bytes::{Buf, Bytes, BytesMut};
use thiserror::Error;

pub use codec::{PayloadReader, PayloadWriter};
pub use message::*;

/// "BBM1".
pub const MAGIC: u32 = 0x4242_4D31;

/// magic(4) + msg_type(1) + seq(8) + payload_len(4).
pub const HEADER_LEN: usize = 17;

/// Default upper bound on a single frame's payload.
pub const DEFAULT_MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("payload of {0} bytes exceeds the frame limit of {1} bytes")]
    Oversize(usize, usize),
    #[error("bad magic {0:#010x}")]
    BadMagic(u32),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("malformed {msg_type} payload: {reason}")]
    Malformed { msg_type: MsgType, reason: String },
    #[error("unexpected {0} frame")]
    Unexpected(MsgType),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// Only an incomplete frame can be resolved by reading more bytes; every
    /// other decode error means the connection has lost framing and must be
    /// dropped.
    pub fn is_retryable(&self) -> bool {
        matches!(self, WireError::Incomplete { .. })
    }
}

macro_rules! msg_types {
    ($($name:ident = $code:literal => $text:literal,)*) => {
        /// Message type discriminant. Codes are part of the wire contract and
        /// never change.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u8)]
        pub enum MsgType {
            $($name = $code,)*
        }

        impl MsgType {
            pub const ALL: &'static [MsgType] = &[$(MsgType::$name,)*];

            pub fn code(self) -> u8 {
                self as u8
            }

            pub fn from_code(code: u8) -> Option<MsgType> {
                match code {
                    $($code => Some(MsgType::$name),)*
                    _ => None,
                }
            }

            pub fn name(self) -> &'static str {
                match self {
                    $(MsgType::$name => $text,)*
                }
            }
        }
    };
}

msg_types! {
    Put = 0x01 => "PUT",
    PutAck = 0x02 => "PUT_ACK",
    ReplPut = 0x03 => "REPL_PUT",
    ReplAck = 0x04 => "REPL_ACK",
    Get = 0x05 => "GET",
    GetResp = 0x06 => "GET_RESP",
    Redirect = 0x07 => "REDIRECT",
    MemQuery = 0x08 => "MEM_QUERY",
    MemResp = 0x09 => "MEM_RESP",
    Ping = 0x0A => "PING",
    PingAck = 0x0B => "PING_ACK",
    NeighborQuery = 0x0C => "NEIGHBOR_QUERY",
    NeighborResp = 0x0D => "NEIGHBOR_RESP",
    FailReport = 0x0E => "FAIL_REPORT",
    FailConfirmReq = 0x0F => "FAIL_CONFIRM_REQ",
    FailConfirmResp = 0x10 => "FAIL_CONFIRM_RESP",
    JoinReq = 0x11 => "JOIN_REQ",
    RingUpdate = 0x12 => "RING_UPDATE",
    Register = 0x13 => "REGISTER",
    FlushCmd = 0x14 => "FLUSH_CMD",
    ShuffleMeta = 0x15 => "SHUFFLE_META",
    ShuffleData = 0x16 => "SHUFFLE_DATA",
    FlushDone = 0x17 => "FLUSH_DONE",
    LookupReq = 0x18 => "LOOKUP_REQ",
    LookupResp = 0x19 => "LOOKUP_RESP",
    Error = 0x1A => "ERROR",
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub msg_type: MsgType,
    pub seq: u64,
    pub payload: Bytes,
}

impl Frame {
    pub fn new(msg_type: MsgType, seq: u64, payload: impl Into<Bytes>) -> Self {
        Frame {
            msg_type,
            seq,
            payload: payload.into(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Result<Vec<u8>, WireError> {
        encode_frame(self.msg_type, self.seq, &self.payload)
    }
}

pub fn encode_frame(msg_type: MsgType, seq: u64, payload: &[u8]) -> Result<Vec<u8>, WireError> {
    let mut out = Vec::with_capacity(HEADER_LEN + payload.len());
    encode_frame_into(&mut out, msg_type, seq, payload)?;
    Ok(out)
}

pub fn encode_frame_into(
    out: &mut Vec<u8>,
    msg_type: MsgType,
    seq: u64,
    payload: &[u8],
) -> Result<(), WireError> {
    let len = u32::try_from(payload.len())
        .map_err(|_| WireError::Oversize(payload.len(), u32::MAX as usize))?;
    out.extend_from_slice(&MAGIC.to_be_bytes());
    out.push(msg_type.code());
    out.extend_from_slice(&seq.to_be_bytes());
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(payload);
    Ok(())
}

struct Header {
    msg_type: MsgType,
    seq: u64,
    payload_len: usize,
}

fn parse_header(buf: &[u8; HEADER_LEN]) -> Result<Header, WireError> {
    let magic = u32::from_be_bytes(buf[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(WireError::BadMagic(magic));
    }
    let msg_type = MsgType::from_code(buf[4]).ok_or(WireError::UnknownType(buf[4]))?;
    let seq = u64::from_be_bytes(buf[5..13].try_into().unwrap());
    let payload_len = u32::from_be_bytes(buf[13..17].try_into().unwrap()) as usize;
    Ok(Header {
        msg_type,
        seq,
        payload_len,
    })
}

/// Decodes one frame from the front of `src`, returning it together with the
/// number of bytes consumed (always `17 + payload_len`).
pub fn decode_frame(src: &[u8]) -> Result<(Frame, usize), WireError> {
    if src.len() < HEADER_LEN {
        // A corrupted magic is reported as soon as it is visible.
        if src.len() >= 4 {
            let magic = u32::from_be_bytes(src[0..4].try_into().unwrap());
            if magic != MAGIC {
                return Err(WireError::BadMagic(magic));
            }
        }
        return Err(WireError::Incomplete {
            needed: HEADER_LEN - src.len(),
        });
    }
    let header = parse_header(src[..HEADER_LEN].try_into().unwrap())?;
    let total = HEADER_LEN + header.payload_len;
    if src.len() < total {
        return Err(WireError::Incomplete {
            needed: total - src.len(),
        });
    }
    let frame = Frame {
        msg_type: header.msg_type,
        seq: header.seq,
        payload: Bytes::copy_from_slice(&src[HEADER_LEN..total]),
    };
    Ok((frame, total))
}

/// Incremental decoder over a growing byte buffer. Payloads are split off the
/// buffer without copying.
#[derive(Debug)]
pub struct FrameDecoder {
    buf: BytesMut,
    max_payload: usize,
}

impl Default for FrameDecoder {
    fn default() -> Self {
        FrameDecoder::new(DEFAULT_MAX_PAYLOAD)
    }
}

impl FrameDecoder {
    pub fn new(max_payload: usize) -> Self {
        FrameDecoder {
            buf: BytesMut::new(),
            max_payload,
        }
    }

    pub fn extend(&mut self, data: &[u8]) {
        self.buf.extend_from_slice(data);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    /// Returns `Ok(None)` when more bytes are needed.
    pub fn next_frame(&mut self) -> Result<Option<Frame>, WireError> {
        if self.buf.len() < HEADER_LEN {
            if self.buf.len() >= 4 {
                let magic = u32::from_be_bytes(self.buf[0..4].try_into().unwrap());
                if magic != MAGIC {
                    return Err(WireError::BadMagic(magic));
                }
            }
            return Ok(None);
        }
        let header = parse_header(self.buf[..HEADER_LEN].try_into().unwrap())?;
        if header.payload_len > self.max_payload {
            return Err(WireError::Oversize(header.payload_len, self.max_payload));
        }
        if self.buf.len() < HEADER_LEN + header.payload_len {
            self.buf.reserve(HEADER_LEN + header.payload_len - self.buf.len());
            return Ok(None);
        }
        self.buf.advance(HEADER_LEN);
        let payload = self.buf.split_to(header.payload_len).freeze();
        Ok(Some(Frame {
            msg_type: header.msg_type,
            seq: header.seq,
            payload,
        }))
    }
}

/// Blocking read of exactly one frame. A clean end-of-stream before the first
/// header byte surfaces as `io::ErrorKind::UnexpectedEof`.
pub fn read_frame<R: Read>(reader: &mut R, max_payload: usize) -> Result<Frame, WireError> {
    read_frame_in(reader, max_payload, &mut crate::arena::Arena::new(0))
}

/// Like `read_frame`, with large payloads placed in `arena`.
pub fn read_frame_in<R: Read>(
    reader: &mut R,
    max_payload: usize,
    arena: &mut crate::arena::Arena,
) -> Result<Frame, WireError> {
    let mut header = [0u8; HEADER_LEN];
    reader.read_exact(&mut header)?;
    let header = parse_header(&header)?;
    if header.payload_len > max_payload {
        return Err(WireError::Oversize(header.payload_len, max_payload));
    }
    let payload = arena.read_exact(reader, header.payload_len)?;
    Ok(Frame {
        msg_type: header.msg_type,
        seq: header.seq,
        payload,
    })
}

pub fn frame_header(msg_type: MsgType, seq: u64, payload_len: usize) -> Result<[u8; HEADER_LEN], WireError> {
    let len = u32::try_from(payload_len).map_err(|_| WireError::Oversize(payload_len, u32::MAX as usize))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC.to_be_bytes());
    header[4] = msg_type.code();
    header[5..13].copy_from_slice(&seq.to_be_bytes());
    header[13..17].copy_from_slice(&len.to_be_bytes());
    Ok(header)
}

pub fn write_frame<W: Write>(writer: &mut W, frame: &Frame) -> Result<(), WireError> {
    let header = frame_header(frame.msg_type, frame.seq, frame.payload.len())?;
    writer.write_all(&header)?;
    writer.write_all(&frame.payload)?;
    Ok(())
}
