//! Wire protocol: framing, typed messages and traffic accounting.

pub mod accounting;
pub mod frame;
pub mod message;

use thiserror::Error;

pub use accounting::{
    byte_accounting, classify, recovery_share_formula, Accounting, Direction, Totals, TraceEntry, TrafficPhase,
};
pub use frame::{
    decode_frame, encode_frame, read_frame, write_frame, Frame, FrameAssembler, MessageKind, HEADER_LEN, MAX_PAYLOAD,
};
pub use message::{ErrorCode, Message, SHARE_Y_LEN};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("framing error: {0}")]
    Framing(String),
    #[error("unknown message type {0:#04x}")]
    UnknownKind(u8),
    #[error("malformed payload: {0}")]
    Payload(String),
    #[error("transport: {0}")]
    Io(String),
}
