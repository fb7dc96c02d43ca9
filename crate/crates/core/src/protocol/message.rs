//! Typed payloads for each [`MessageKind`].
//!
//! | kind               | payload                                                   |
//! |--------------------|-----------------------------------------------------------|
//! | `PK_ANNOUNCE`      | signed announce (200)                                     |
//! | `PK_SET`           | count u16 ‖ count × (device-id ‖ signed announce)         |
//! | `SHARE_RELAY`      | recipient-id ‖ encrypted share (60)                       |
//! | `SHARE_DELIVER`    | dealer-id ‖ encrypted share (60)                          |
//! | `MASKED_GRADIENT`  | round u32 ‖ sample-count u32 ‖ field vector (LE u32 each) |
//! | `RECOVERY_REQUEST` | round u32 ‖ count u16 ‖ count × dropped-id                |
//! | `SHARE_RESPONSE`   | dropped-id ‖ share y-bytes (32)                           |
//! | `GLOBAL_UPDATE`    | round u32 ‖ next-round u32 ‖ f32 LE each                  |
//! | `EPOCH_ROTATE`     | empty                                                     |
//! | `ERROR`            | code u8 ‖ subject-id ‖ detail u32                         |
//! | `ESTABLISHED`      | verified-peer count u16                                   |
//! | `JOIN`             | empty                                                     |
//!
//! Integers in headers are big-endian. `next-round == 0` in a `GLOBAL_UPDATE`
//! means no round follows until the next `EPOCH_ROTATE`; `round == 0` marks
//! the epoch's opening broadcast.

use super::frame::{Frame, MessageKind};
use super::ProtocolError;
use crate::crypto::{EncryptedShare, SignedAnnounce};
use crate::field::FieldVector;
use crate::id::DeviceId;

pub const SHARE_Y_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[repr(u8)]
pub enum ErrorCode {
    /// No encrypted share is held from the subject device.
    NoShare = 1,
    /// The held share failed authentication.
    Tamper = 2,
    /// The enclave is not sealed.
    NotReady = 3,
    /// A message arrived that the receiver cannot use.
    Rejected = 4,
}

impl ErrorCode {
    fn from_u8(b: u8) -> Result<Self, ProtocolError> {
        Ok(match b {
            1 => ErrorCode::NoShare,
            2 => ErrorCode::Tamper,
            3 => ErrorCode::NotReady,
            4 => ErrorCode::Rejected,
            other => return Err(ProtocolError::Payload(format!("unknown error code {other}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    PkAnnounce(SignedAnnounce),
    PkSet(Vec<(DeviceId, SignedAnnounce)>),
    ShareRelay {
        recipient: DeviceId,
        share: EncryptedShare,
    },
    ShareDeliver {
        dealer: DeviceId,
        share: EncryptedShare,
    },
    MaskedGradient {
        round: u32,
        sample_count: u32,
        vector: FieldVector,
    },
    RecoveryRequest {
        round: u32,
        dropped: Vec<DeviceId>,
    },
    ShareResponse {
        dropped: DeviceId,
        y: [u8; SHARE_Y_LEN],
    },
    GlobalUpdate {
        round: u32,
        next_round: u32,
        update: Vec<f32>,
    },
    EpochRotate,
    Error {
        code: ErrorCode,
        subject: DeviceId,
        detail: u32,
    },
    Established {
        verified: u16,
    },
    Join,
}

struct Reader<'a> {
    b: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.b.len() < n {
            return Err(ProtocolError::Payload(format!("need {n} bytes, {} left", self.b.len())));
        }
        let (head, tail) = self.b.split_at(n);
        self.b = tail;
        Ok(head)
    }

    fn u16(&mut self) -> Result<u16, ProtocolError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ProtocolError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn id(&mut self) -> Result<DeviceId, ProtocolError> {
        Ok(DeviceId::from_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn announce(&mut self) -> Result<SignedAnnounce, ProtocolError> {
        SignedAnnounce::from_bytes(self.take(SignedAnnounce::WIRE_LEN)?)
            .map_err(|e| ProtocolError::Payload(e.to_string()))
    }

    fn share(&mut self) -> Result<EncryptedShare, ProtocolError> {
        EncryptedShare::from_bytes(self.take(EncryptedShare::WIRE_LEN)?)
            .map_err(|e| ProtocolError::Payload(e.to_string()))
    }

    fn rest(&mut self) -> &'a [u8] {
        std::mem::take(&mut self.b)
    }

    fn finish(self) -> Result<(), ProtocolError> {
        if self.b.is_empty() {
            Ok(())
        } else {
            Err(ProtocolError::Payload(format!("{} trailing bytes", self.b.len())))
        }
    }
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self {
            Message::PkAnnounce(_) => MessageKind::PkAnnounce,
            Message::PkSet(_) => MessageKind::PkSet,
            Message::ShareRelay { .. } => MessageKind::ShareRelay,
            Message::ShareDeliver { .. } => MessageKind::ShareDeliver,
            Message::MaskedGradient { .. } => MessageKind::MaskedGradient,
            Message::RecoveryRequest { .. } => MessageKind::RecoveryRequest,
            Message::ShareResponse { .. } => MessageKind::ShareResponse,
            Message::GlobalUpdate { .. } => MessageKind::GlobalUpdate,
            Message::EpochRotate => MessageKind::EpochRotate,
            Message::Error { .. } => MessageKind::Error,
            Message::Established { .. } => MessageKind::Established,
            Message::Join => MessageKind::Join,
        }
    }

    pub fn encode_payload(&self) -> Vec<u8> {
        let mut out = Vec::new();
        match self {
            Message::PkAnnounce(a) => out.extend_from_slice(&a.to_bytes()),
            Message::PkSet(list) => {
                out.extend_from_slice(&(list.len() as u16).to_be_bytes());
                for (id, a) in list {
                    out.extend_from_slice(&id.to_bytes());
                    out.extend_from_slice(&a.to_bytes());
                }
            }
            Message::ShareRelay { recipient: id, share } | Message::ShareDeliver { dealer: id, share } => {
                out.extend_from_slice(&id.to_bytes());
                out.extend_from_slice(&share.to_bytes());
            }
            Message::MaskedGradient {
                round,
                sample_count,
                vector,
            } => {
                out.reserve(8 + vector.len() * 4);
                out.extend_from_slice(&round.to_be_bytes());
                out.extend_from_slice(&sample_count.to_be_bytes());
                out.extend_from_slice(&vector.to_le_bytes());
            }
            Message::RecoveryRequest { round, dropped } => {
                out.extend_from_slice(&round.to_be_bytes());
                out.extend_from_slice(&(dropped.len() as u16).to_be_bytes());
                for id in dropped {
                    out.extend_from_slice(&id.to_bytes());
                }
            }
            Message::ShareResponse { dropped, y } => {
                out.extend_from_slice(&dropped.to_bytes());
                out.extend_from_slice(y);
            }
            Message::GlobalUpdate {
                round,
                next_round,
                update,
            } => {
                out.reserve(8 + update.len() * 4);
                out.extend_from_slice(&round.to_be_bytes());
                out.extend_from_slice(&next_round.to_be_bytes());
                for v in update {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Message::EpochRotate | Message::Join => {}
            Message::Error { code, subject, detail } => {
                out.push(*code as u8);
                out.extend_from_slice(&subject.to_bytes());
                out.extend_from_slice(&detail.to_be_bytes());
            }
            Message::Established { verified } => out.extend_from_slice(&verified.to_be_bytes()),
        }
        out
    }

    pub fn decode_payload(kind: MessageKind, payload: &[u8]) -> Result<Message, ProtocolError> {
        let mut r = Reader { b: payload };
        let msg = match kind {
            MessageKind::PkAnnounce => Message::PkAnnounce(r.announce()?),
            MessageKind::PkSet => {
                let n = r.u16()? as usize;
                let mut list = Vec::with_capacity(n.min(payload.len() / 208 + 1));
                for _ in 0..n {
                    list.push((r.id()?, r.announce()?));
                }
                Message::PkSet(list)
            }
            MessageKind::ShareRelay => Message::ShareRelay {
                recipient: r.id()?,
                share: r.share()?,
            },
            MessageKind::ShareDeliver => Message::ShareDeliver {
                dealer: r.id()?,
                share: r.share()?,
            },
            MessageKind::MaskedGradient => {
                let round = r.u32()?;
                let sample_count = r.u32()?;
                let vector = FieldVector::from_le_bytes(r.rest()).map_err(|e| ProtocolError::Payload(e.to_string()))?;
                Message::MaskedGradient {
                    round,
                    sample_count,
                    vector,
                }
            }
            MessageKind::RecoveryRequest => {
                let round = r.u32()?;
                let n = r.u16()? as usize;
                let dropped = (0..n).map(|_| r.id()).collect::<Result<_, _>>()?;
                Message::RecoveryRequest { round, dropped }
            }
            MessageKind::ShareResponse => Message::ShareResponse {
                dropped: r.id()?,
                y: r.take(SHARE_Y_LEN)?.try_into().unwrap(),
            },
            MessageKind::GlobalUpdate => {
                let round = r.u32()?;
                let next_round = r.u32()?;
                let rest = r.rest();
                if !rest.len().is_multiple_of(4) {
                    return Err(ProtocolError::Payload("update length not a multiple of 4".into()));
                }
                let update = rest
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Message::GlobalUpdate {
                    round,
                    next_round,
                    update,
                }
            }
            MessageKind::EpochRotate => Message::EpochRotate,
            MessageKind::Error => Message::Error {
                code: ErrorCode::from_u8(r.take(1)?[0])?,
                subject: r.id()?,
                detail: r.u32()?,
            },
            MessageKind::Established => Message::Established { verified: r.u16()? },
            MessageKind::Join => Message::Join,
        };
        r.finish()?;
        Ok(msg)
    }

    pub fn into_frame(&self, epoch: u32, sender: DeviceId) -> Frame {
        Frame {
            kind: self.kind(),
            epoch,
            sender,
            payload: self.encode_payload(),
        }
    }

    pub fn from_frame(frame: &Frame) -> Result<Message, ProtocolError> {
        Message::decode_payload(frame.kind, &frame.payload)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{keygen, sign_pk, DeviceIdentity, RootCa};
    use crate::field::FieldElem;
    use crate::protocol::{decode_frame, encode_frame, HEADER_LEN};
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{RngCore, SeedableRng};

    fn announce(seed: u64) -> SignedAnnounce {
        let mut rng = StdRng::seed_from_u64(seed);
        let ca = RootCa::from_seed([1; 32]);
        let mut s = [0u8; 32];
        rng.fill_bytes(&mut s);
        let cert = ca.issue(DeviceId(seed), DeviceIdentity::verifying_key_for_seed(&s));
        let id = DeviceIdentity::new(s, cert).unwrap();
        sign_pk(&keygen(&mut rng).public(), &id)
    }

    fn share(seed: u8) -> EncryptedShare {
        let mut b = [seed; EncryptedShare::WIRE_LEN];
        b[0] = seed.wrapping_add(1);
        EncryptedShare::from_bytes(&b).unwrap()
    }

    fn samples() -> Vec<Message> {
        vec![
            Message::PkAnnounce(announce(1)),
            Message::PkSet(vec![(DeviceId(1), announce(1)), (DeviceId(2), announce(2))]),
            Message::ShareRelay {
                recipient: DeviceId(9),
                share: share(3),
            },
            Message::ShareDeliver {
                dealer: DeviceId(8),
                share: share(4),
            },
            Message::MaskedGradient {
                round: 4,
                sample_count: 120,
                vector: FieldVector::from_elems(vec![FieldElem::reduce(5), FieldElem::reduce(1 << 30)]),
            },
            Message::RecoveryRequest {
                round: 4,
                dropped: vec![DeviceId(3), DeviceId(5)],
            },
            Message::ShareResponse {
                dropped: DeviceId(3),
                y: [7; 32],
            },
            Message::GlobalUpdate {
                round: 4,
                next_round: 5,
                update: vec![1.5, -2.25],
            },
            Message::EpochRotate,
            Message::Error {
                code: ErrorCode::NoShare,
                subject: DeviceId(3),
                detail: 4,
            },
            Message::Established { verified: 19 },
            Message::Join,
        ]
    }

    #[test]
    fn every_kind_round_trips_through_a_frame() {
        let msgs = samples();
        assert_eq!(msgs.len(), MessageKind::ALL.len());
        for m in msgs {
            let f = m.into_frame(2, DeviceId(77));
            let back = decode_frame(&encode_frame(&f)).unwrap();
            assert_eq!(Message::from_frame(&back).unwrap(), m);
        }
    }

    #[test]
    fn masked_gradient_size_for_50k() {
        let m = Message::MaskedGradient {
            round: 1,
            sample_count: 10,
            vector: FieldVector::zeros(50_000),
        };
        assert_eq!(m.encode_payload().len(), 4 + 4 + 200_000);
        assert_eq!(m.into_frame(1, DeviceId(1)).wire_len(), HEADER_LEN + 200_008);
    }

    #[test]
    fn fixed_payload_sizes() {
        let sizes: Vec<(MessageKind, usize)> = samples().iter().map(|m| (m.kind(), m.encode_payload().len())).collect();
        let get = |k| sizes.iter().find(|(kk, _)| *kk == k).unwrap().1;
        assert_eq!(get(MessageKind::PkAnnounce), 200);
        assert_eq!(get(MessageKind::ShareRelay), 68);
        assert_eq!(get(MessageKind::ShareResponse), 40);
        assert_eq!(get(MessageKind::Error), 13);
        assert_eq!(get(MessageKind::EpochRotate), 0);
    }

    #[test]
    fn rejects_bad_payloads() {
        assert!(Message::decode_payload(MessageKind::ShareResponse, &[0; 39]).is_err());
        assert!(Message::decode_payload(MessageKind::ShareResponse, &[0; 41]).is_err());
        assert!(Message::decode_payload(MessageKind::EpochRotate, &[0]).is_err());
        // Unreduced field element.
        let mut mg = vec![0u8; 8];
        mg.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(Message::decode_payload(MessageKind::MaskedGradient, &mg).is_err());
        assert!(Message::decode_payload(MessageKind::PkSet, &[0, 5]).is_err());
        assert!(Message::decode_payload(MessageKind::Error, &[99; 13]).is_err());
    }

    proptest! {
        #[test]
        fn payload_decode_never_panics(kind in 0usize..12, bytes in prop::collection::vec(any::<u8>(), 0..300)) {
            let _ = Message::decode_payload(MessageKind::ALL[kind], &bytes);
        }

        #[test]
        fn gradient_round_trip(round: u32, count: u32, words in prop::collection::vec(0u32..crate::field::P, 0..64)) {
            let m = Message::MaskedGradient { round, sample_count: count, vector: FieldVector::from_u32s(&words).unwrap() };
            prop_assert_eq!(Message::decode_payload(MessageKind::MaskedGradient, &m.encode_payload()).unwrap(), m);
        }

        #[test]
        fn update_round_trip(round: u32, next: u32, vals in prop::collection::vec(-1.0e6f32..1.0e6, 0..64)) {
            let m = Message::GlobalUpdate { round, next_round: next, update: vals };
            prop_assert_eq!(Message::decode_payload(MessageKind::GlobalUpdate, &m.encode_payload()).unwrap(), m);
        }
    }
}
