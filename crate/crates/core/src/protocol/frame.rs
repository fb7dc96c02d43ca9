//! Length-prefixed frames.
//!
//! ```text
//! msg_type[1] | epoch[4, BE] | sender[8] | payload_len[4, BE] | payload
//! ```

use std::io::{self, Read, Write};

use super::ProtocolError;
use crate::id::DeviceId;

pub const HEADER_LEN: usize = 17;
/// Upper bound on a single payload; a 2^24-element gradient plus headroom.
pub const MAX_PAYLOAD: usize = 1 << 27;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum MessageKind {
    PkAnnounce = 1,
    PkSet = 2,
    ShareRelay = 3,
    ShareDeliver = 4,
    MaskedGradient = 5,
    RecoveryRequest = 6,
    ShareResponse = 7,
    GlobalUpdate = 8,
    EpochRotate = 9,
    Error = 10,
    Established = 11,
    Join = 12,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        MessageKind::PkAnnounce,
        MessageKind::PkSet,
        MessageKind::ShareRelay,
        MessageKind::ShareDeliver,
        MessageKind::MaskedGradient,
        MessageKind::RecoveryRequest,
        MessageKind::ShareResponse,
        MessageKind::GlobalUpdate,
        MessageKind::EpochRotate,
        MessageKind::Error,
        MessageKind::Established,
        MessageKind::Join,
    ];

    pub fn from_u8(b: u8) -> Result<Self, ProtocolError> {
        Self::ALL
            .into_iter()
            .find(|k| *k as u8 == b)
            .ok_or(ProtocolError::UnknownKind(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MessageKind,
    pub epoch: u32,
    pub sender: DeviceId,
    pub payload: Vec<u8>,
}

impl Frame {
    pub fn wire_len(&self) -> usize {
        HEADER_LEN + self.payload.len()
    }
}

pub fn encode_frame(frame: &Frame) -> Vec<u8> {
    let mut out = Vec::with_capacity(frame.wire_len());
    out.push(frame.kind as u8);
    out.extend_from_slice(&frame.epoch.to_be_bytes());
    out.extend_from_slice(&frame.sender.to_bytes());
    out.extend_from_slice(&(frame.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&frame.payload);
    out
}

struct Header {
    kind: MessageKind,
    epoch: u32,
    sender: DeviceId,
    len: usize,
}

fn parse_header(h: &[u8; HEADER_LEN]) -> Result<Header, ProtocolError> {
    let kind = MessageKind::from_u8(h[0])?;
    let len = u32::from_be_bytes(h[13..17].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(ProtocolError::Framing(format!("payload length {len} exceeds limit")));
    }
    Ok(Header {
        kind,
        epoch: u32::from_be_bytes(h[1..5].try_into().unwrap()),
        sender: DeviceId::from_bytes(h[5..13].try_into().unwrap()),
        len,
    })
}

/// Decodes exactly one frame; trailing or missing bytes are errors.
pub fn decode_frame(bytes: &[u8]) -> Result<Frame, ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Framing(format!(
            "truncated header: {} bytes",
            bytes.len()
        )));
    }
    let h = parse_header(bytes[..HEADER_LEN].try_into().unwrap())?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != h.len {
        return Err(ProtocolError::Framing(format!(
            "payload_len {} but {} bytes follow",
            h.len,
            body.len()
        )));
    }
    Ok(Frame {
        kind: h.kind,
        epoch: h.epoch,
        sender: h.sender,
        payload: body.to_vec(),
    })
}

pub fn write_frame<W: Write>(w: &mut W, frame: &Frame) -> io::Result<usize> {
    let bytes = encode_frame(frame);
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Reads one frame from a stream. `Ok(None)` on clean EOF before a header.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Frame>, ProtocolError> {
    let mut h = [0u8; HEADER_LEN];
    let mut filled = 0;
    while filled < HEADER_LEN {
        match r.read(&mut h[filled..]) {
            Ok(0) if filled == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::Framing("stream ended inside a header".into())),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(ProtocolError::Io(e.to_string())),
        }
    }
    let header = parse_header(&h)?;
    let mut payload = vec![0u8; header.len];
    r.read_exact(&mut payload)
        .map_err(|e| ProtocolError::Framing(format!("stream ended inside a payload: {e}")))?;
    Ok(Some(Frame {
        kind: header.kind,
        epoch: header.epoch,
        sender: header.sender,
        payload,
    }))
}

/// Incremental reassembly of frames from arbitrary read boundaries.
#[derive(Debug, Default)]
pub struct FrameAssembler {
    buf: Vec<u8>,
}

impl FrameAssembler {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn next_frame(&mut self) -> Result<Option<Frame>, ProtocolError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let h = parse_header(self.buf[..HEADER_LEN].try_into().unwrap())?;
        let total = HEADER_LEN + h.len;
        if self.buf.len() < total {
            return Ok(None);
        }
        let payload = self.buf[HEADER_LEN..total].to_vec();
        self.buf.drain(..total);
        Ok(Some(Frame {
            kind: h.kind,
            epoch: h.epoch,
            sender: h.sender,
            payload,
        }))
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}
