//! The aggregation server as a sans-IO state machine.
//!
//! Each epoch opens with an idle phase in which the server is a bulletin
//! board (collect `PK_ANNOUNCE`, broadcast `PK_SET`) and a share relay
//! (`SHARE_RELAY` in, `SHARE_DELIVER` out). Once every member reports
//! `ESTABLISHED` the server opens the epoch's rounds. A round ends when all
//! participants have sent their `MASKED_GRADIENT` or the deadline passes;
//! missing participants are declared dropped for the rest of the epoch and
//! their masks are reconstructed from survivor-held shares.
//!
//! The transport calls [`ServerNode::handle`] for every inbound frame and
//! [`ServerNode::on_timeout`] whenever the current stage's deadline expires.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::config::{CohortConfig, Mode};
use crate::crypto::kx::public_key;
use crate::crypto::{derive_keys, dh, shamir_reconstruct, ShamirShare, SignedAnnounce};
use crate::enclave::cohort_x;
use crate::field::{decode_aggregate, FieldVector};
use crate::id::DeviceId;
use crate::masking::pairwise_mask;
use crate::protocol::{ErrorCode, Frame, Message};

pub type Outgoing = (DeviceId, Frame);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RoundOutcome {
    Complete,
    /// Corrected for `k` dropped clients.
    Recovered {
        k: usize,
    },
    /// Unmasked mode: aggregated the `k`-short survivor set directly.
    Partial {
        k: usize,
    },
    Failed {
        reason: String,
    },
    /// The epoch never established.
    Deferred,
}

impl RoundOutcome {
    pub fn label(&self) -> String {
        match self {
            RoundOutcome::Complete => "COMPLETE".into(),
            RoundOutcome::Recovered { k } => format!("RECOVERED({k})"),
            RoundOutcome::Partial { k } => format!("PARTIAL({k})"),
            RoundOutcome::Failed { .. } => "FAILED".into(),
            RoundOutcome::Deferred => "DEFERRED".into(),
        }
    }

    pub fn has_aggregate(&self) -> bool {
        matches!(
            self,
            RoundOutcome::Complete | RoundOutcome::Recovered { .. } | RoundOutcome::Partial { .. }
        )
    }
}

/// What the server learned from one round.
#[derive(Clone, Serialize)]
pub struct RoundResult {
    pub epoch: u32,
    pub round: u32,
    pub outcome: RoundOutcome,
    /// Survivors whose gradients are in the aggregate.
    pub participants: Vec<DeviceId>,
    /// Dropped clients whose masks were removed.
    pub corrected: Vec<DeviceId>,
    /// Dropped clients whose keys were reconstructed in this round.
    pub reconstructed: Vec<DeviceId>,
    #[serde(skip)]
    pub field_sum: Option<FieldVector>,
    #[serde(skip)]
    pub decoded: Option<Vec<f64>>,
    #[serde(skip)]
    pub weighted_update: Option<Vec<f64>>,
    pub sample_total: u64,
}

impl fmt::Debug for RoundResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RoundResult")
            .field("epoch", &self.epoch)
            .field("round", &self.round)
            .field("outcome", &self.outcome)
            .field("participants", &self.participants.len())
            .field("corrected", &self.corrected)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ServerEvent {
    IdleStarted {
        epoch: u32,
        attempt: u32,
        candidates: usize,
    },
    PkSetSent {
        epoch: u32,
        members: usize,
    },
    IdleRerun {
        epoch: u32,
        excluded: Vec<DeviceId>,
    },
    Established {
        epoch: u32,
        members: usize,
    },
    Deferred {
        epoch: u32,
        reason: String,
    },
    LateDiscarded {
        from: DeviceId,
        round: u32,
    },
    RecoveryRequested {
        round: u32,
        dropped: Vec<DeviceId>,
    },
    KeyReconstructed {
        round: u32,
        dropped: DeviceId,
    },
    KeyMismatch {
        round: u32,
        dropped: DeviceId,
    },
}

/// Who is in the cohort this epoch, and what the server knows about them.
#[derive(Debug, Default, Clone)]
pub struct CohortRegistry {
    /// Signed announces of the current key establishment.
    pub announces: BTreeMap<DeviceId, SignedAnnounce>,
    /// Canonical `PK_SET` listing; fixes Shamir x-coordinates.
    pub members: Vec<DeviceId>,
    pub established: BTreeSet<DeviceId>,
    pub sample_counts: BTreeMap<DeviceId, u32>,
    pub dropped_this_epoch: BTreeSet<DeviceId>,
    pub reconstructed_keys: BTreeMap<DeviceId, [u8; 32]>,
    prg_keys: BTreeMap<DeviceId, Vec<(DeviceId, [u8; 32])>>,
}

impl CohortRegistry {
    fn reset(&mut self) {
        *self = CohortRegistry::default();
    }
}

#[derive(Debug)]
struct RoundLedger {
    round: u32,
    participants: BTreeSet<DeviceId>,
    received: BTreeMap<DeviceId, (FieldVector, u32)>,
}

#[derive(Debug)]
struct RecoveryState {
    need: BTreeSet<DeviceId>,
    survivors: BTreeSet<DeviceId>,
    shares: BTreeMap<DeviceId, Vec<ShamirShare>>,
    answered: BTreeSet<(DeviceId, DeviceId)>,
}

#[derive(Debug)]
enum Stage {
    Start,
    AwaitAnnounce {
        candidates: BTreeSet<DeviceId>,
        attempt: u32,
    },
    AwaitEstablished {
        relays_from: BTreeMap<DeviceId, usize>,
        reported: BTreeSet<DeviceId>,
        attempt: u32,
    },
    Round(RoundLedger),
    Recovery(RoundLedger, RecoveryState),
    Finished,
}

pub const MAX_IDLE_ATTEMPTS: u32 = 3;

type PkSetHook = Box<dyn FnMut(u32, &mut Vec<(DeviceId, SignedAnnounce)>) + Send>;

pub struct ServerNode {
    cfg: CohortConfig,
    enrolled: Vec<DeviceId>,
    epoch: u32,
    stage: Stage,
    registry: CohortRegistry,
    results: Vec<RoundResult>,
    events: Vec<ServerEvent>,
    late_discarded: u64,
    pk_set_hook: Option<PkSetHook>,
}

impl fmt::Debug for ServerNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ServerNode")
            .field("epoch", &self.epoch)
            .field("stage", &self.stage)
            .finish_non_exhaustive()
    }
}

impl ServerNode {
    pub fn new(cfg: &CohortConfig, enrolled: Vec<DeviceId>) -> Self {
        let mut enrolled = enrolled;
        enrolled.sort_unstable();
        enrolled.dedup();
        ServerNode {
            cfg: cfg.clone(),
            enrolled,
            epoch: 0,
            stage: Stage::Start,
            registry: CohortRegistry::default(),
            results: Vec::new(),
            events: Vec::new(),
            late_discarded: 0,
            pk_set_hook: None,
        }
    }

    /// Lets a test rewrite the `PK_SET` listing before broadcast (a server
    /// substituting keys). Called with the idle attempt number.
    pub fn set_pk_set_hook(&mut self, hook: impl FnMut(u32, &mut Vec<(DeviceId, SignedAnnounce)>) + Send + 'static) {
        self.pk_set_hook = Some(Box::new(hook));
    }

    pub fn epoch(&self) -> u32 {
        self.epoch
    }

    pub fn registry(&self) -> &CohortRegistry {
        &self.registry
    }

    pub fn events(&self) -> &[ServerEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ServerEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn drain_results(&mut self) -> Vec<RoundResult> {
        std::mem::take(&mut self.results)
    }

    pub fn late_discarded(&self) -> u64 {
        self.late_discarded
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.stage, Stage::Finished)
    }

    pub fn in_idle_phase(&self) -> bool {
        matches!(self.stage, Stage::AwaitAnnounce { .. } | Stage::AwaitEstablished { .. })
    }

    /// Changes whenever the server moves to a new stage; a transport
    /// restarts its deadline when it does.
    pub fn stage_key(&self) -> (u32, u32, u8, u32) {
        let (tag, attempt) = match &self.stage {
            Stage::Start => (0, 0),
            Stage::AwaitAnnounce { attempt, .. } => (1, *attempt),
            Stage::AwaitEstablished { attempt, .. } => (2, *attempt),
            Stage::Round(_) => (3, 0),
            Stage::Recovery(..) => (4, 0),
            Stage::Finished => (5, 0),
        };
        (self.epoch, self.round_context(), tag, attempt)
    }

    /// Deadline of the current stage, measured from when it began.
    pub fn timeout(&self) -> Duration {
        match self.stage {
            Stage::AwaitAnnounce { .. } | Stage::AwaitEstablished { .. } => self.cfg.idle_timeout,
            _ => self.cfg.round_timeout,
        }
    }

    fn epoch_len(&self) -> u32 {
        match self.cfg.mode {
            Mode::Sync => 1,
            _ => self.cfg.epoch_len,
        }
    }

    fn epochs(&self) -> u32 {
        self.cfg.rounds.div_ceil(self.epoch_len())
    }

    fn epoch_rounds(&self, epoch: u32) -> std::ops::RangeInclusive<u32> {
        let e = self.epoch_len();
        ((epoch - 1) * e + 1)..=(epoch * e).min(self.cfg.rounds)
    }

    /// Round the server is working on, or about to open.
    pub fn round_context(&self) -> u32 {
        match &self.stage {
            Stage::Round(l) | Stage::Recovery(l, _) => l.round,
            Stage::Start | Stage::Finished => 0,
            _ => *self.epoch_rounds(self.epoch.max(1)).start(),
        }
    }

    fn frame(&self, msg: &Message) -> Frame {
        msg.into_frame(self.epoch, DeviceId::SERVER)
    }

    fn broadcast<'a>(&self, to: impl IntoIterator<Item = &'a DeviceId>, msg: &Message, out: &mut Vec<Outgoing>) {
        let f = self.frame(msg);
        for id in to {
            out.push((*id, f.clone()));
        }
    }

    // ---- epoch lifecycle ------------------------------------------------

    pub fn start(&mut self) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if matches!(self.stage, Stage::Start) {
            self.rotate_epoch(&mut out);
        }
        out
    }

    /// Clears per-epoch state and opens the next epoch (or finishes).
    fn rotate_epoch(&mut self, out: &mut Vec<Outgoing>) {
        self.epoch += 1;
        self.registry.reset();
        if self.epoch > self.epochs() {
            self.stage = Stage::Finished;
            return;
        }
        let candidates: BTreeSet<DeviceId> = self.enrolled.iter().copied().collect();
        if self.cfg.mode == Mode::Plaintext {
            self.registry.members = self.enrolled.clone();
            self.begin_rounds(out);
            return;
        }
        self.start_idle(candidates, 1, out);
    }

    fn start_idle(&mut self, candidates: BTreeSet<DeviceId>, attempt: u32, out: &mut Vec<Outgoing>) {
        self.registry.announces.clear();
        self.events.push(ServerEvent::IdleStarted {
            epoch: self.epoch,
            attempt,
            candidates: candidates.len(),
        });
        self.broadcast(&candidates, &Message::EpochRotate, out);
        self.stage = Stage::AwaitAnnounce { candidates, attempt };
    }

    fn defer_epoch(&mut self, reason: String, out: &mut Vec<Outgoing>) {
        self.events.push(ServerEvent::Deferred {
            epoch: self.epoch,
            reason: reason.clone(),
        });
        for round in self.epoch_rounds(self.epoch) {
            self.results.push(RoundResult {
                epoch: self.epoch,
                round,
                outcome: RoundOutcome::Deferred,
                participants: Vec::new(),
                corrected: Vec::new(),
                reconstructed: Vec::new(),
                field_sum: None,
                decoded: None,
                weighted_update: None,
                sample_total: 0,
            });
        }
        self.rotate_epoch(out);
    }

    fn send_pk_set(&mut self, attempt: u32, out: &mut Vec<Outgoing>) {
        let members: Vec<DeviceId> = self.registry.announces.keys().copied().collect();
        let mut listing: Vec<(DeviceId, SignedAnnounce)> =
            self.registry.announces.iter().map(|(id, a)| (*id, *a)).collect();
        if let Some(hook) = self.pk_set_hook.as_mut() {
            hook(attempt, &mut listing);
        }
        self.registry.members = members;
        self.events.push(ServerEvent::PkSetSent {
            epoch: self.epoch,
            members: self.registry.members.len(),
        });
        let members = self.registry.members.clone();
        self.broadcast(&members, &Message::PkSet(listing), out);
        self.stage = Stage::AwaitEstablished {
            relays_from: BTreeMap::new(),
            reported: BTreeSet::new(),
            attempt,
        };
    }

    fn begin_rounds(&mut self, out: &mut Vec<Outgoing>) {
        let members = self.registry.members.clone();
        self.registry.established = members.iter().copied().collect();
        self.events.push(ServerEvent::Established {
            epoch: self.epoch,
            members: members.len(),
        });
        let first = *self.epoch_rounds(self.epoch).start();
        self.broadcast(
            &members,
            &Message::GlobalUpdate {
                round: 0,
                next_round: first,
                update: Vec::new(),
            },
            out,
        );
        self.stage = Stage::Round(RoundLedger {
            round: first,
            participants: self.registry.established.clone(),
            received: BTreeMap::new(),
        });
    }

    // ---- inbound --------------------------------------------------------

    /// Processes a frame received on `from`'s connection.
    pub fn handle(&mut self, from: DeviceId, frame: &Frame) -> Vec<Outgoing> {
        let mut out = Vec::new();
        if frame.sender != from || frame.epoch != self.epoch {
            return out;
        }
        let Ok(msg) = Message::from_frame(frame) else {
            return out;
        };
        match msg {
            Message::PkAnnounce(a) => {
                if let Stage::AwaitAnnounce { candidates, attempt } = &self.stage {
                    if candidates.contains(&from) {
                        let attempt = *attempt;
                        self.registry.announces.insert(from, a);
                        if self.registry.announces.len() == candidates.len() {
                            self.send_pk_set(attempt, &mut out);
                        }
                    }
                }
            }
            Message::ShareRelay { recipient, share } => {
                let ok = matches!(self.stage, Stage::AwaitEstablished { .. })
                    && recipient != from
                    && self.registry.members.binary_search(&from).is_ok()
                    && self.registry.members.binary_search(&recipient).is_ok();
                if ok {
                    if let Stage::AwaitEstablished { relays_from, .. } = &mut self.stage {
                        *relays_from.entry(from).or_default() += 1;
                    }
                    let f = self.frame(&Message::ShareDeliver { dealer: from, share });
                    out.push((recipient, f));
                }
            }
            Message::Established { verified } => {
                let full = verified as usize + 1 == self.registry.members.len();
                let is_member = self.registry.members.binary_search(&from).is_ok();
                if let Stage::AwaitEstablished { reported, .. } = &mut self.stage {
                    if is_member {
                        reported.insert(from);
                        if full {
                            self.registry.established.insert(from);
                        }
                    }
                    if self.registry.established.len() == self.registry.members.len() {
                        self.begin_rounds(&mut out);
                    }
                }
            }
            Message::MaskedGradient {
                round,
                sample_count,
                vector,
            } => self.on_gradient(from, round, sample_count, vector, &mut out),
            Message::ShareResponse { dropped, y } => {
                let x = cohort_x(&self.registry.members, from);
                if let (Stage::Recovery(_, rec), Some(x)) = (&mut self.stage, x) {
                    if rec.survivors.contains(&from)
                        && rec.need.contains(&dropped)
                        && rec.answered.insert((from, dropped))
                    {
                        rec.shares.entry(dropped).or_default().push(ShamirShare { x, y });
                    }
                }
                self.maybe_finish_recovery(&mut out);
            }
            Message::Error { code, subject, .. } => {
                if let Stage::Recovery(_, rec) = &mut self.stage {
                    if rec.survivors.contains(&from)
                        && matches!(code, ErrorCode::NoShare | ErrorCode::Tamper | ErrorCode::NotReady)
                    {
                        rec.answered.insert((from, subject));
                    }
                }
                self.maybe_finish_recovery(&mut out);
            }
            _ => {}
        }
        out
    }

    fn on_gradient(
        &mut self,
        from: DeviceId,
        round: u32,
        sample_count: u32,
        vector: FieldVector,
        out: &mut Vec<Outgoing>,
    ) {
        if self.registry.dropped_this_epoch.contains(&from) {
            self.late_discarded += 1;
            self.events.push(ServerEvent::LateDiscarded { from, round });
            return;
        }
        let dim = self.cfg.dim;
        let Stage::Round(ledger) = &mut self.stage else {
            return;
        };
        if ledger.round != round || !ledger.participants.contains(&from) || vector.len() != dim {
            return;
        }
        if ledger.received.contains_key(&from) {
            return;
        }
        ledger.received.insert(from, (vector, sample_count));
        if ledger.received.len() == ledger.participants.len() {
            self.close_round(out);
        }
    }

    // ---- deadlines ------------------------------------------------------

    /// The current stage's deadline has passed.
    pub fn on_timeout(&mut self) -> Vec<Outgoing> {
        let mut out = Vec::new();
        match std::mem::replace(&mut self.stage, Stage::Finished) {
            Stage::Start => {
                self.stage = Stage::Start;
                self.rotate_epoch(&mut out);
            }
            Stage::Finished => {}
            Stage::AwaitAnnounce { candidates, attempt } => {
                let n = self.registry.announces.len();
                self.stage = Stage::AwaitAnnounce { candidates, attempt };
                if n >= self.cfg.quorum && n > self.cfg.t {
                    self.send_pk_set(attempt, &mut out);
                } else {
                    self.defer_epoch(format!("{n} announces below quorum {}", self.cfg.quorum), &mut out);
                }
            }
            Stage::AwaitEstablished {
                relays_from,
                reported,
                attempt,
            } => {
                let m = self.registry.members.len();
                // Members that did their part: reported completion or relayed
                // a share to every other member.
                let healthy: BTreeSet<DeviceId> = self
                    .registry
                    .members
                    .iter()
                    .copied()
                    .filter(|id| reported.contains(id) || relays_from.get(id).copied().unwrap_or(0) + 1 == m)
                    .collect();
                let excluded: Vec<DeviceId> = self
                    .registry
                    .members
                    .iter()
                    .copied()
                    .filter(|id| !healthy.contains(id))
                    .collect();
                if attempt >= MAX_IDLE_ATTEMPTS {
                    self.defer_epoch(
                        format!("key establishment incomplete after {attempt} attempts"),
                        &mut out,
                    );
                } else if healthy.len() < self.cfg.quorum || healthy.len() <= self.cfg.t {
                    self.defer_epoch(format!("{} healthy members below quorum", healthy.len()), &mut out);
                } else {
                    self.events.push(ServerEvent::IdleRerun {
                        epoch: self.epoch,
                        excluded,
                    });
                    self.registry.established.clear();
                    self.start_idle(healthy, attempt + 1, &mut out);
                }
            }
            Stage::Round(ledger) => {
                self.stage = Stage::Round(ledger);
                self.close_round(&mut out);
            }
            Stage::Recovery(ledger, rec) => {
                self.stage = Stage::Recovery(ledger, rec);
                self.finish_recovery(&mut out);
            }
        }
        out
    }

    // ---- aggregation and recovery --------------------------------------

    fn close_round(&mut self, out: &mut Vec<Outgoing>) {
        let Stage::Round(ledger) = std::mem::replace(&mut self.stage, Stage::Finished) else {
            unreachable!("close_round outside a round");
        };
        let missing: Vec<DeviceId> = ledger
            .participants
            .iter()
            .copied()
            .filter(|id| !ledger.received.contains_key(id))
            .collect();
        self.registry.dropped_this_epoch.extend(missing.iter().copied());
        if self.cfg.mode == Mode::Plaintext {
            let k = self.registry.dropped_this_epoch.len();
            let outcome = if k == 0 {
                RoundOutcome::Complete
            } else {
                RoundOutcome::Partial { k }
            };
            return self.finalize(ledger, outcome, Vec::new(), out);
        }
        let survivors = ledger.received.len();
        if survivors < self.cfg.t {
            let reason = format!("{survivors} survivors below threshold {}", self.cfg.t);
            return self.finalize(ledger, RoundOutcome::Failed { reason }, Vec::new(), out);
        }
        let need: BTreeSet<DeviceId> = self
            .registry
            .dropped_this_epoch
            .iter()
            .copied()
            .filter(|d| !self.registry.reconstructed_keys.contains_key(d) && self.registry.announces.contains_key(d))
            .collect();
        if need.is_empty() {
            return self.correct_and_finalize(ledger, Vec::new(), out);
        }
        let survivors: BTreeSet<DeviceId> = ledger.received.keys().copied().collect();
        let request = Message::RecoveryRequest {
            round: ledger.round,
            dropped: need.iter().copied().collect(),
        };
        self.events.push(ServerEvent::RecoveryRequested {
            round: ledger.round,
            dropped: need.iter().copied().collect(),
        });
        self.broadcast(&survivors, &request, out);
        self.stage = Stage::Recovery(
            ledger,
            RecoveryState {
                need,
                survivors,
                shares: BTreeMap::new(),
                answered: BTreeSet::new(),
            },
        );
    }

    fn maybe_finish_recovery(&mut self, out: &mut Vec<Outgoing>) {
        if let Stage::Recovery(_, rec) = &self.stage {
            if rec.answered.len() == rec.need.len() * rec.survivors.len() {
                self.finish_recovery(out);
            }
        }
    }

    fn finish_recovery(&mut self, out: &mut Vec<Outgoing>) {
        let Stage::Recovery(ledger, rec) = std::mem::replace(&mut self.stage, Stage::Finished) else {
            unreachable!("finish_recovery outside recovery");
        };
        let t = self.cfg.t;
        let mut reconstructed = Vec::new();
        for d in &rec.need {
            let shares = rec.shares.get(d).map(Vec::as_slice).unwrap_or(&[]);
            let sk = match shamir_reconstruct(shares, t) {
                Ok(sk) => sk,
                Err(e) => {
                    let reason = format!("cannot reconstruct key of {d}: {e}");
                    return self.finalize(ledger, RoundOutcome::Failed { reason }, reconstructed, out);
                }
            };
            let enrolled = self.registry.announces[d].pk;
            if public_key(&sk) != enrolled {
                self.events.push(ServerEvent::KeyMismatch {
                    round: ledger.round,
                    dropped: *d,
                });
                let reason = format!("corrupted shares: reconstructed key of {d} does not match its public key");
                return self.finalize(ledger, RoundOutcome::Failed { reason }, reconstructed, out);
            }
            self.events.push(ServerEvent::KeyReconstructed {
                round: ledger.round,
                dropped: *d,
            });
            self.derive_dropped_keys(*d, &sk);
            self.registry.reconstructed_keys.insert(*d, sk);
            reconstructed.push(*d);
        }
        self.correct_and_finalize(ledger, reconstructed, out);
    }

    /// Pairwise PRG keys of a dropped client with every other member.
    fn derive_dropped_keys(&mut self, dropped: DeviceId, sk: &[u8; 32]) {
        let keys = self
            .registry
            .members
            .iter()
            .filter(|j| **j != dropped)
            .filter_map(|j| {
                let pk = self.registry.announces.get(j)?.pk;
                dh(sk, &pk).ok().map(|s| (*j, derive_keys(&s).k_prg))
            })
            .collect();
        self.registry.prg_keys.insert(dropped, keys);
    }

    /// Mask the dropped client would have applied in `round`.
    pub fn reconstructed_mask(&self, dropped: DeviceId, round: u32) -> Option<FieldVector> {
        let keys = self.registry.prg_keys.get(&dropped)?;
        Some(pairwise_mask(
            dropped,
            keys.iter().map(|(j, k)| (*j, k)),
            round,
            self.cfg.dim,
        ))
    }

    fn correct_and_finalize(&mut self, ledger: RoundLedger, reconstructed: Vec<DeviceId>, out: &mut Vec<Outgoing>) {
        let k = self.registry.dropped_this_epoch.len();
        let outcome = if k == 0 {
            RoundOutcome::Complete
        } else {
            RoundOutcome::Recovered { k }
        };
        self.finalize(ledger, outcome, reconstructed, out);
    }

    fn finalize(
        &mut self,
        ledger: RoundLedger,
        mut outcome: RoundOutcome,
        reconstructed: Vec<DeviceId>,
        out: &mut Vec<Outgoing>,
    ) {
        let round = ledger.round;
        let participants: Vec<DeviceId> = ledger.received.keys().copied().collect();
        let sample_total: u64 = ledger.received.values().map(|(_, n)| *n as u64).sum();
        for (id, (_, n)) in &ledger.received {
            self.registry.sample_counts.insert(*id, *n);
        }
        let mut corrected = Vec::new();
        let (mut field_sum, mut decoded, mut weighted) = (None, None, None);
        if outcome.has_aggregate() {
            let mut sum = FieldVector::zeros(self.cfg.dim);
            for (v, _) in ledger.received.values() {
                sum.add_assign_vec(v).expect("dimension checked on receipt");
            }
            if self.cfg.mode.masked() {
                for d in self.registry.dropped_this_epoch.clone() {
                    if let Some(m) = self.reconstructed_mask(d, round) {
                        sum.add_assign_vec(&m).expect("mask has model dimension");
                        corrected.push(d);
                    }
                }
            }
            match decode_aggregate(&sum, participants.len() as u32, &self.cfg.quant) {
                Ok(dec) => {
                    let scale = if sample_total == 0 {
                        0.0
                    } else {
                        self.cfg.max_samples as f64 / sample_total as f64
                    };
                    weighted = Some(dec.iter().map(|v| v * scale).collect::<Vec<f64>>());
                    decoded = Some(dec);
                }
                Err(e) => {
                    outcome = RoundOutcome::Failed {
                        reason: format!("decode: {e}"),
                    };
                }
            }
            field_sum = Some(sum);
        }

        let last = *self.epoch_rounds(self.epoch).end();
        let next_round = if round < last { round + 1 } else { 0 };
        let update: Vec<f32> = match (&outcome, &weighted) {
            (o, Some(w)) if o.has_aggregate() => w.iter().map(|v| *v as f32).collect(),
            _ => Vec::new(),
        };
        let survivors: Vec<DeviceId> = participants.clone();
        self.broadcast(
            &survivors,
            &Message::GlobalUpdate {
                round,
                next_round,
                update,
            },
            out,
        );
        self.results.push(RoundResult {
            epoch: self.epoch,
            round,
            outcome,
            participants,
            corrected,
            reconstructed,
            field_sum,
            decoded,
            weighted_update: weighted,
            sample_total,
        });
        if next_round == 0 {
            self.rotate_epoch(out);
        } else {
            self.stage = Stage::Round(RoundLedger {
                round: next_round,
                participants: survivors.into_iter().collect(),
                received: BTreeMap::new(),
            });
        }
    }
}
