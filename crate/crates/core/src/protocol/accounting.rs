//! Per-phase traffic accounting over a frame trace.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::frame::{Frame, MessageKind, HEADER_LEN};
use super::message::SHARE_Y_LEN;
use crate::id::DeviceId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrafficPhase {
    Idle,
    Active,
    Recovery,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    /// Client to server.
    Uplink,
    /// Server to client.
    Downlink,
}

/// Metadata of one frame on the wire. Payloads are not retained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub phase: TrafficPhase,
    pub direction: Direction,
    pub kind: MessageKind,
    pub epoch: u32,
    /// Round the frame belongs to; 0 outside any round.
    pub round: u32,
    pub client: DeviceId,
    pub bytes: usize,
    /// Shamir share material carried (the `y` bytes of a `SHARE_RESPONSE`).
    pub share_bytes: usize,
}

/// Default phase of a frame kind. `GLOBAL_UPDATE` with round 0 opens an
/// epoch and belongs to the idle phase.
pub fn classify(frame: &Frame) -> TrafficPhase {
    match frame.kind {
        MessageKind::MaskedGradient => TrafficPhase::Active,
        MessageKind::GlobalUpdate => {
            if frame.payload.get(..4) == Some(&[0, 0, 0, 0]) {
                TrafficPhase::Idle
            } else {
                TrafficPhase::Active
            }
        }
        MessageKind::RecoveryRequest | MessageKind::ShareResponse | MessageKind::Error => TrafficPhase::Recovery,
        MessageKind::PkAnnounce
        | MessageKind::PkSet
        | MessageKind::ShareRelay
        | MessageKind::ShareDeliver
        | MessageKind::EpochRotate
        | MessageKind::Established
        | MessageKind::Join => TrafficPhase::Idle,
    }
}

impl TraceEntry {
    pub fn new(frame: &Frame, phase: TrafficPhase, direction: Direction, client: DeviceId, round: u32) -> Self {
        let share_bytes = match frame.kind {
            MessageKind::ShareResponse => frame.payload.len().saturating_sub(8).min(SHARE_Y_LEN),
            _ => 0,
        };
        TraceEntry {
            phase,
            direction,
            kind: frame.kind,
            epoch: frame.epoch,
            round,
            client,
            bytes: HEADER_LEN + frame.payload.len(),
            share_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub frames: u64,
    pub bytes: u64,
}

impl Totals {
    fn add(&mut self, bytes: usize) {
        self.frames += 1;
        self.bytes += bytes as u64;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Accounting {
    pub total: Totals,
    pub by_phase: BTreeMap<TrafficPhase, Totals>,
    pub by_direction: BTreeMap<Direction, Totals>,
    pub by_phase_direction: BTreeMap<String, Totals>,
    pub by_kind: BTreeMap<MessageKind, Totals>,
    pub recovery_share_bytes: u64,
}

impl Accounting {
    pub fn phase(&self, p: TrafficPhase) -> Totals {
        self.by_phase.get(&p).copied().unwrap_or_default()
    }

    pub fn kind(&self, k: MessageKind) -> Totals {
        self.by_kind.get(&k).copied().unwrap_or_default()
    }

    pub fn phase_direction(&self, p: TrafficPhase, d: Direction) -> Totals {
        self.by_phase_direction
            .get(&format!("{p:?}/{d:?}"))
            .copied()
            .unwrap_or_default()
    }
}

pub fn byte_accounting<'a>(trace: impl IntoIterator<Item = &'a TraceEntry>) -> Accounting {
    let mut acc = Accounting::default();
    for e in trace {
        acc.total.add(e.bytes);
        acc.by_phase.entry(e.phase).or_default().add(e.bytes);
        acc.by_direction.entry(e.direction).or_default().add(e.bytes);
        acc.by_phase_direction
            .entry(format!("{:?}/{:?}", e.phase, e.direction))
            .or_default()
            .add(e.bytes);
        acc.by_kind.entry(e.kind).or_default().add(e.bytes);
        if e.phase == TrafficPhase::Recovery {
            acc.recovery_share_bytes += e.share_bytes as u64;
        }
    }
    acc
}

/// Total Shamir share bytes sent by survivors when `k` of `n` clients drop.
pub fn recovery_share_formula(n: usize, k: usize) -> usize {
    n.saturating_sub(k) * k * SHARE_Y_LEN
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::protocol::Message;

    fn response_trace(n: usize, k: usize) -> Vec<TraceEntry> {
        let mut trace = Vec::new();
        for s in 0..(n - k) {
            for d in 0..k {
                let f = Message::ShareResponse {
                    dropped: DeviceId(d as u64 + 100),
                    y: [1; 32],
                }
                .into_frame(1, DeviceId(s as u64 + 1));
                trace.push(TraceEntry::new(&f, classify(&f), Direction::Uplink, f.sender, 5));
            }
        }
        trace
    }

    #[test]
    fn recovery_share_totals_match_formula() {
        assert_eq!(recovery_share_formula(20, 3), 1632);
        assert_eq!(recovery_share_formula(20, 7), 2912);
        assert_eq!(recovery_share_formula(20, 0), 0);
        for (n, k) in [(20, 3), (20, 7), (5, 1), (20, 0)] {
            let acc = byte_accounting(&response_trace(n, k));
            assert_eq!(acc.recovery_share_bytes as usize, recovery_share_formula(n, k));
            assert_eq!(
                acc.kind(MessageKind::ShareResponse).bytes as usize,
                (n - k) * k * (17 + 40)
            );
        }
    }

    #[test]
    fn opening_update_is_idle() {
        let open = Message::GlobalUpdate {
            round: 0,
            next_round: 1,
            update: vec![],
        }
        .into_frame(1, DeviceId::SERVER);
        let normal = Message::GlobalUpdate {
            round: 1,
            next_round: 2,
            update: vec![0.0],
        }
        .into_frame(1, DeviceId::SERVER);
        assert_eq!(classify(&open), TrafficPhase::Idle);
        assert_eq!(classify(&normal), TrafficPhase::Active);
    }

    #[test]
    fn totals_split_by_phase_and_direction() {
        let up = Message::Established { verified: 3 }.into_frame(1, DeviceId(1));
        let down = Message::EpochRotate.into_frame(1, DeviceId::SERVER);
        let trace = vec![
            TraceEntry::new(&up, classify(&up), Direction::Uplink, DeviceId(1), 0),
            TraceEntry::new(&down, classify(&down), Direction::Downlink, DeviceId(1), 0),
        ];
        let acc = byte_accounting(&trace);
        assert_eq!(
            acc.total,
            Totals {
                frames: 2,
                bytes: 19 + 17
            }
        );
        assert_eq!(acc.phase(TrafficPhase::Idle).frames, 2);
        assert_eq!(acc.phase_direction(TrafficPhase::Idle, Direction::Uplink).bytes, 19);
        assert_eq!(acc.recovery_share_bytes, 0);
    }
}
