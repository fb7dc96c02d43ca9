//! Per-device orchestration.
//!
//! [`ClientNode`] is a sans-IO state machine: the transport hands it inbound
//! frames and sends whatever frames it returns to the server. In the idle
//! phase it runs the daemon steps
//!
//! 1. `EPOCH_ROTATE` → KEYGEN → `PK_ANNOUNCE`
//! 2. `PK_SET` → COMPUTE_SEEDS → SEAL(t) → one `SHARE_RELAY` per verified peer
//! 3. `SHARE_DELIVER` × verified peers → `ESTABLISHED`
//!
//! and in the active phase answers each `GLOBAL_UPDATE` that names a next
//! round with a single `MASKED_GRADIENT`, and each `RECOVERY_REQUEST` with
//! one `SHARE_RESPONSE` (or `ERROR`) per dropped peer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{CohortConfig, Mode};
use crate::crypto::{EncryptedShare, RootCa};
use crate::enclave::storage::{read_u32_be, DeviceDir, COUNTER_FILE, EPOCH_FILE};
use crate::enclave::{Backend, Enclave, EnclaveError, KillPoint, Phase};
use crate::field::{add_vec, quantize, FieldVector};
use crate::id::DeviceId;
use crate::protocol::{ErrorCode, Frame, Message};
use crate::workload;

pub const SHARES_FILE: &str = "shares.bin";
pub const ESTABLISHED_FILE: &str = "established.bin";

/// Instrumented crash sites in the daemon itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DaemonStep {
    AfterKeygen,
    AfterAnnounce,
    AfterComputeSeeds,
    AfterSeal,
    MidShareRelay,
    AfterShareRelay,
    ActiveAfterMask,
}

impl DaemonStep {
    pub const ALL: [DaemonStep; 7] = [
        DaemonStep::AfterKeygen,
        DaemonStep::AfterAnnounce,
        DaemonStep::AfterComputeSeeds,
        DaemonStep::AfterSeal,
        DaemonStep::MidShareRelay,
        DaemonStep::AfterShareRelay,
        DaemonStep::ActiveAfterMask,
    ];

    fn slug(self) -> &'static str {
        match self {
            DaemonStep::AfterKeygen => "after-keygen",
            DaemonStep::AfterAnnounce => "after-announce",
            DaemonStep::AfterComputeSeeds => "after-compute-seeds",
            DaemonStep::AfterSeal => "after-seal",
            DaemonStep::MidShareRelay => "mid-share-relay",
            DaemonStep::AfterShareRelay => "after-share-relay",
            DaemonStep::ActiveAfterMask => "active-after-mask",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CrashPoint {
    Daemon(DaemonStep),
    Enclave(KillPoint),
}

impl CrashPoint {
    /// Every instrumented point: daemon steps, then enclave persistence steps.
    pub fn all() -> Vec<CrashPoint> {
        DaemonStep::ALL
            .into_iter()
            .map(CrashPoint::Daemon)
            .chain(KillPoint::ALL.into_iter().map(CrashPoint::Enclave))
            .collect()
    }

    pub fn slug(self) -> String {
        match self {
            CrashPoint::Daemon(s) => s.slug().to_string(),
            CrashPoint::Enclave(k) => {
                let name = format!("{k:?}");
                let mut out = String::from("enclave");
                for c in name.chars() {
                    if c.is_ascii_uppercase() {
                        out.push('-');
                    }
                    out.push(c.to_ascii_lowercase());
                }
                out
            }
        }
    }

    /// Crash points inside an active round (as opposed to the idle phase).
    pub fn is_active_phase(self) -> bool {
        matches!(
            self,
            CrashPoint::Daemon(DaemonStep::ActiveAfterMask)
                | CrashPoint::Enclave(KillPoint::MaskComputed)
                | CrashPoint::Enclave(KillPoint::MaskCounterStaged)
                | CrashPoint::Enclave(KillPoint::MaskCounterCommitted)
        )
    }
}

impl fmt::Display for CrashPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug())
    }
}

impl FromStr for CrashPoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        CrashPoint::all()
            .into_iter()
            .find(|p| p.slug() == s)
            .ok_or_else(|| format!("unknown crash point {s:?}"))
    }
}

/// Fixed per run.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DropoutPolicy {
    #[default]
    None,
    /// Absent from the listed rounds: never transmits nor answers recovery.
    Permanent(BTreeSet<u32>),
    /// Crash once at `point` during `epoch`.
    CrashAt { point: CrashPoint, epoch: u32 },
}

impl DropoutPolicy {
    pub fn absent_from(first: u32, last: u32) -> Self {
        DropoutPolicy::Permanent((first..=last).collect())
    }

    fn absent(&self, round: u32) -> bool {
        matches!(self, DropoutPolicy::Permanent(rounds) if rounds.contains(&round))
    }
}

impl FromStr for DropoutPolicy {
    type Err = String;

    /// `none`, `permanent:<a>-<b>`, `permanent:<r1>,<r2>,...`,
    /// `crash:<point>` or `crash:<point>@<epoch>`.
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "none" {
            return Ok(DropoutPolicy::None);
        }
        if let Some(spec) = s.strip_prefix("permanent:") {
            let num = |x: &str| x.trim().parse::<u32>().map_err(|e| format!("bad round {x:?}: {e}"));
            let rounds = if let Some((a, b)) = spec.split_once('-') {
                (num(a)?..=num(b)?).collect()
            } else {
                spec.split(',').map(num).collect::<Result<_, _>>()?
            };
            return Ok(DropoutPolicy::Permanent(rounds));
        }
        if let Some(spec) = s.strip_prefix("crash:") {
            let (point, epoch) = match spec.split_once('@') {
                Some((p, e)) => (p, e.parse().map_err(|e| format!("bad epoch: {e}"))?),
                None => (spec, 1),
            };
            return Ok(DropoutPolicy::CrashAt {
                point: point.parse()?,
                epoch,
            });
        }
        Err(format!("unknown dropout policy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Establishment {
    Unestablished,
    Established,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    NotEstablished,
    NotReady,
    StaleRound { counter: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClientEvent {
    Announced {
        epoch: u32,
    },
    Established {
        epoch: u32,
        verified: usize,
    },
    EstablishmentAborted {
        epoch: u32,
        reason: String,
    },
    Transmitted {
        round: u32,
    },
    Skipped {
        round: u32,
        reason: SkipReason,
    },
    Absent {
        round: u32,
    },
    Served {
        round: u32,
        dropped: DeviceId,
        code: Option<ErrorCode>,
    },
    Crashed {
        point: CrashPoint,
    },
    Restarted {
        phase: Phase,
    },
    Update {
        round: u32,
        len: usize,
    },
}

#[derive(Debug, Error)]
pub enum ClientError {
    #[error(transparent)]
    Enclave(#[from] EnclaveError),
    #[error("storage: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed share store")]
    ShareStore,
}

/// Deterministic per-device RNG.
fn device_rng(seed: u64, id: DeviceId, salt: u64) -> ChaCha20Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_be_bytes());
    s[8..16].copy_from_slice(&id.to_bytes());
    s[16..24].copy_from_slice(&salt.to_be_bytes());
    ChaCha20Rng::from_seed(s)
}

type PlaintextObserver = Box<dyn FnMut(u32, &FieldVector) + Send>;

pub struct ClientNode {
    id: DeviceId,
    cfg: CohortConfig,
    sample_count: u32,
    dir: PathBuf,
    enclave: Option<Enclave>,
    policy: DropoutPolicy,
    crash_fired: bool,
    crashed: bool,
    restarts: u64,
    epoch: u32,
    establishment: Establishment,
    expected_peers: BTreeSet<DeviceId>,
    shares_sent: bool,
    received: BTreeMap<DeviceId, EncryptedShare>,
    events: Vec<ClientEvent>,
    outbound_plain: Option<PlaintextObserver>,
}

impl fmt::Debug for ClientNode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientNode")
            .field("id", &self.id)
            .field("epoch", &self.epoch)
            .field("establishment", &self.establishment)
            .field("crashed", &self.crashed)
            .finish_non_exhaustive()
    }
}

pub fn backend_for(mode: Mode) -> Option<Backend> {
    match mode {
        Mode::Chronos | Mode::Sync => Some(Backend::Trusted),
        Mode::ChronosSw => Some(Backend::Software),
        Mode::Plaintext => None,
    }
}

impl ClientNode {
    /// Provisions a fresh device directory (when masking) and starts the
    /// daemon.
    pub fn provision(
        cfg: &CohortConfig,
        id: DeviceId,
        dir: impl AsRef<Path>,
        ca: &RootCa,
        policy: DropoutPolicy,
    ) -> Result<Self, ClientError> {
        let dir = dir.as_ref().to_path_buf();
        let enclave = match backend_for(cfg.mode) {
            Some(b) => Some(Enclave::provision(&dir, id, ca, b, &mut device_rng(cfg.seed, id, 0))?),
            None => {
                DeviceDir::new(&dir).create()?;
                None
            }
        };
        let mut node = ClientNode::with_enclave(cfg, id, dir, enclave, policy);
        node.remove_share_store()?;
        Ok(node)
    }

    /// Starts the daemon on an already provisioned directory.
    pub fn open(
        cfg: &CohortConfig,
        id: DeviceId,
        dir: impl AsRef<Path>,
        policy: DropoutPolicy,
    ) -> Result<Self, ClientError> {
        let dir = dir.as_ref().to_path_buf();
        let enclave = match backend_for(cfg.mode) {
            Some(b) => Some(Enclave::open(&dir, b, &mut device_rng(cfg.seed, id, 1))?),
            None => None,
        };
        let mut node = ClientNode::with_enclave(cfg, id, dir, enclave, policy);
        node.load_persistent()?;
        Ok(node)
    }

    fn with_enclave(
        cfg: &CohortConfig,
        id: DeviceId,
        dir: PathBuf,
        enclave: Option<Enclave>,
        policy: DropoutPolicy,
    ) -> Self {
        ClientNode {
            id,
            sample_count: workload::sample_count(cfg.seed, id, cfg.max_samples),
            cfg: cfg.clone(),
            dir,
            enclave,
            policy,
            crash_fired: false,
            crashed: false,
            restarts: 0,
            epoch: 0,
            establishment: Establishment::Unestablished,
            expected_peers: BTreeSet::new(),
            shares_sent: false,
            received: BTreeMap::new(),
            events: Vec::new(),
            outbound_plain: None,
        }
    }

    pub fn id(&self) -> DeviceId {
        self.id
    }

    pub fn establishment(&self) -> Establishment {
        self.establishment
    }

    pub fn sample_count(&self) -> u32 {
        self.sample_count
    }

    pub fn received_shares(&self) -> &BTreeMap<DeviceId, EncryptedShare> {
        &self.received
    }

    pub fn events(&self) -> &[ClientEvent] {
        &self.events
    }

    pub fn take_events(&mut self) -> Vec<ClientEvent> {
        std::mem::take(&mut self.events)
    }

    pub fn is_crashed(&self) -> bool {
        self.crashed
    }

    pub fn restarts(&self) -> u64 {
        self.restarts
    }

    pub fn enclave(&self) -> Option<&Enclave> {
        self.enclave.as_ref()
    }

    pub fn enclave_mut(&mut self) -> Option<&mut Enclave> {
        self.enclave.as_mut()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Observes every quantized-but-unmasked vector just before it is
    /// masked and sent. Test instrumentation.
    pub fn observe_plaintext(&mut self, f: impl FnMut(u32, &FieldVector) + Send + 'static) {
        self.outbound_plain = Some(Box::new(f));
    }

    /// `(sealing generation, counter)` as persisted on disk, if sealed.
    pub fn persisted_counter(&self) -> Option<(u32, u32)> {
        let d = DeviceDir::new(&self.dir);
        let c = d.read(COUNTER_FILE).ok().flatten().and_then(|b| read_u32_be(&b))?;
        let g = d.read(EPOCH_FILE).ok().flatten().and_then(|b| read_u32_be(&b))?;
        Some((g, c))
    }

    // ---- persistence of non-secret daemon state -------------------------

    fn store(&self) -> DeviceDir {
        DeviceDir::new(&self.dir)
    }

    fn save_share_store(&self) -> Result<(), ClientError> {
        let mut out = Vec::with_capacity(2 + self.received.len() * (8 + EncryptedShare::WIRE_LEN));
        out.extend_from_slice(&(self.received.len() as u16).to_be_bytes());
        for (dealer, es) in &self.received {
            out.extend_from_slice(&dealer.to_bytes());
            out.extend_from_slice(&es.to_bytes());
        }
        self.store().write_atomic(SHARES_FILE, &out)?;
        Ok(())
    }

    fn remove_share_store(&mut self) -> Result<(), ClientError> {
        self.received.clear();
        let s = self.store();
        s.remove(SHARES_FILE)?;
        s.remove(ESTABLISHED_FILE)?;
        Ok(())
    }

    fn load_persistent(&mut self) -> Result<(), ClientError> {
        let s = self.store();
        self.received.clear();
        if let Some(b) = s.read(SHARES_FILE)? {
            let n = u16::from_be_bytes(b.get(..2).ok_or(ClientError::ShareStore)?.try_into().unwrap()) as usize;
            let rec = 8 + EncryptedShare::WIRE_LEN;
            if b.len() != 2 + n * rec {
                return Err(ClientError::ShareStore);
            }
            for c in b[2..].chunks_exact(rec) {
                let es = EncryptedShare::from_bytes(&c[8..]).map_err(|_| ClientError::ShareStore)?;
                self.received
                    .insert(DeviceId::from_bytes(c[..8].try_into().unwrap()), es);
            }
        }
        // Established survives a restart only for the seal it was recorded
        // against.
        let marker = s.read(ESTABLISHED_FILE)?.and_then(|b| read_u32_be(&b));
        self.establishment = match (&self.enclave, marker) {
            (Some(e), Some(g)) if e.phase() == Phase::Sealed && e.generation() == g => Establishment::Established,
            _ => Establishment::Unestablished,
        };
        Ok(())
    }

    // ---- crash handling --------------------------------------------------

    fn crash(&mut self, point: CrashPoint) {
        self.crashed = true;
        self.crash_fired = true;
        self.events.push(ClientEvent::Crashed { point });
    }

    fn daemon_crash_due(&mut self, step: DaemonStep) -> bool {
        let due = !self.crash_fired
            && matches!(self.policy, DropoutPolicy::CrashAt { point: CrashPoint::Daemon(s), epoch }
                if s == step && epoch == self.epoch);
        if due {
            self.crash(CrashPoint::Daemon(step));
        }
        due
    }

    /// Maps an enclave error to a crash when the enclave was killed.
    fn note_enclave_error(&mut self, e: &EnclaveError) {
        if let EnclaveError::Killed(k) = e {
            self.crash(CrashPoint::Enclave(*k));
        }
    }

    /// Restarts the daemon process: a fresh enclave session over the same
    /// directory and reloaded share store. Volatile state is lost.
    pub fn restart(&mut self) -> Result<(), ClientError> {
        if let Some(b) = backend_for(self.cfg.mode) {
            self.restarts += 1;
            let e = Enclave::open(&self.dir, b, &mut device_rng(self.cfg.seed, self.id, 1 + self.restarts))?;
            self.events.push(ClientEvent::Restarted { phase: e.phase() });
            self.enclave = Some(e);
        }
        self.crashed = false;
        self.shares_sent = false;
        self.expected_peers.clear();
        self.load_persistent()
    }

    // ---- frame handling --------------------------------------------------

    fn frame(&self, msg: Message) -> Frame {
        msg.into_frame(self.epoch, self.id)
    }

    /// Processes one inbound frame and returns the frames to send.
    pub fn handle(&mut self, frame: &Frame) -> Vec<Frame> {
        if self.crashed {
            return Vec::new();
        }
        let Ok(msg) = Message::from_frame(frame) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        match msg {
            Message::EpochRotate => {
                self.epoch = frame.epoch;
                self.on_rotate(&mut out);
            }
            Message::PkSet(list) => self.on_pk_set(&list, &mut out),
            Message::ShareDeliver { dealer, share } => {
                self.received.insert(dealer, share);
                if self.save_share_store().is_ok() {
                    self.check_established(&mut out);
                }
            }
            Message::GlobalUpdate {
                round,
                next_round,
                update,
            } => {
                self.epoch = frame.epoch;
                if round != 0 {
                    self.events.push(ClientEvent::Update {
                        round,
                        len: update.len(),
                    });
                }
                if next_round != 0 {
                    let g = workload::contribution(&self.cfg, self.id, next_round);
                    if let Some(f) = self.run_active_round(next_round, &g) {
                        out.push(f);
                    }
                }
            }
            Message::RecoveryRequest { round, dropped } => self.serve_recovery(round, &dropped, &mut out),
            _ => {}
        }
        out
    }

    fn abort(&mut self, reason: impl Into<String>) {
        self.establishment = Establishment::Unestablished;
        self.events.push(ClientEvent::EstablishmentAborted {
            epoch: self.epoch,
            reason: reason.into(),
        });
    }

    fn on_rotate(&mut self, out: &mut Vec<Frame>) {
        self.establishment = Establishment::Unestablished;
        self.expected_peers.clear();
        self.shares_sent = false;
        if let Err(e) = self.remove_share_store() {
            return self.abort(format!("share store: {e}"));
        }
        if let DropoutPolicy::CrashAt {
            point: CrashPoint::Enclave(k),
            epoch,
        } = self.policy
        {
            if epoch == self.epoch && !self.crash_fired {
                if let Some(e) = self.enclave.as_mut() {
                    e.arm_kill(k);
                }
            }
        }
        let Some(enclave) = self.enclave.as_mut() else {
            return;
        };
        // A key held from an abandoned establishment is volatile; a new
        // session drops it.
        if matches!(enclave.phase(), Phase::KeyHeld | Phase::SeedsComputed) {
            let b = enclave.backend();
            self.restarts += 1;
            match Enclave::open(&self.dir, b, &mut device_rng(self.cfg.seed, self.id, 1 + self.restarts)) {
                Ok(mut fresh) => {
                    if let DropoutPolicy::CrashAt {
                        point: CrashPoint::Enclave(k),
                        epoch,
                    } = self.policy
                    {
                        if epoch == self.epoch && !self.crash_fired {
                            fresh.arm_kill(k);
                        }
                    }
                    self.enclave = Some(fresh);
                }
                Err(e) => return self.abort(format!("reopen: {e}")),
            }
        }
        let enclave = self.enclave.as_mut().expect("masked mode has an enclave");
        let announce = match enclave.cmd_keygen() {
            Ok(a) => a,
            Err(e) => {
                self.note_enclave_error(&e);
                return self.abort(format!("KEYGEN: {e}"));
            }
        };
        if self.daemon_crash_due(DaemonStep::AfterKeygen) {
            return;
        }
        out.push(self.frame(Message::PkAnnounce(announce)));
        self.events.push(ClientEvent::Announced { epoch: self.epoch });
        self.daemon_crash_due(DaemonStep::AfterAnnounce);
    }

    fn on_pk_set(&mut self, list: &[(DeviceId, crate::crypto::SignedAnnounce)], out: &mut Vec<Frame>) {
        let Some(enclave) = self.enclave.as_mut() else {
            return;
        };
        let report = match enclave.cmd_compute_seeds(list) {
            Ok(r) => r,
            Err(e) => {
                self.note_enclave_error(&e);
                return self.abort(format!("COMPUTE_SEEDS: {e}"));
            }
        };
        self.expected_peers = list
            .iter()
            .map(|(id, _)| *id)
            .filter(|id| *id != self.id && !report.rejected.contains(id))
            .collect();
        if self.daemon_crash_due(DaemonStep::AfterComputeSeeds) {
            return;
        }
        let enclave = self.enclave.as_mut().expect("checked above");
        let shares = match enclave.cmd_seal(self.cfg.t) {
            Ok(s) => s,
            Err(e) => {
                self.note_enclave_error(&e);
                return self.abort(format!("SEAL: {e}"));
            }
        };
        if self.daemon_crash_due(DaemonStep::AfterSeal) {
            return;
        }
        let half = shares.len() / 2;
        for (i, (recipient, share)) in shares.into_iter().enumerate() {
            if i == half && self.daemon_crash_due(DaemonStep::MidShareRelay) {
                return;
            }
            out.push(self.frame(Message::ShareRelay { recipient, share }));
        }
        if self.daemon_crash_due(DaemonStep::AfterShareRelay) {
            return;
        }
        self.shares_sent = true;
        self.check_established(out);
    }

    fn check_established(&mut self, out: &mut Vec<Frame>) {
        if self.establishment == Establishment::Established || !self.shares_sent {
            return;
        }
        let Some(enclave) = self.enclave.as_ref() else {
            return;
        };
        if enclave.phase() != Phase::Sealed || !self.expected_peers.iter().all(|p| self.received.contains_key(p)) {
            return;
        }
        let generation = enclave.generation();
        if let Err(e) = self.store().write_atomic(ESTABLISHED_FILE, &generation.to_be_bytes()) {
            return self.abort(format!("marker: {e}"));
        }
        self.establishment = Establishment::Established;
        let verified = self.expected_peers.len();
        self.events.push(ClientEvent::Established {
            epoch: self.epoch,
            verified,
        });
        out.push(self.frame(Message::Established {
            verified: verified as u16,
        }));
    }

    /// Quantize, mask and emit one `MASKED_GRADIENT` for round `r`, or
    /// nothing when the round must be skipped.
    pub fn run_active_round(&mut self, round: u32, gradient: &[f64]) -> Option<Frame> {
        if self.crashed {
            return None;
        }
        if self.policy.absent(round) {
            self.events.push(ClientEvent::Absent { round });
            return None;
        }
        let q = quantize(gradient, &self.cfg.quant);
        let vector = match self.cfg.mode {
            Mode::Plaintext => q,
            _ => {
                let skip = |s: &mut Self, reason| {
                    s.events.push(ClientEvent::Skipped { round, reason });
                    None
                };
                if self.establishment != Establishment::Established {
                    return skip(self, SkipReason::NotEstablished);
                }
                let enclave = self.enclave.as_mut()?;
                if enclave.cmd_peek_counter().is_err() {
                    return skip(self, SkipReason::NotReady);
                }
                let mask = match enclave.cmd_generate_mask(q.len(), round) {
                    Ok(m) => m,
                    Err(EnclaveError::StaleRound { counter, .. }) => {
                        return skip(self, SkipReason::StaleRound { counter });
                    }
                    Err(e) => {
                        self.note_enclave_error(&e);
                        return skip(self, SkipReason::NotReady);
                    }
                };
                if self.daemon_crash_due(DaemonStep::ActiveAfterMask) {
                    return None;
                }
                if let Some(obs) = self.outbound_plain.as_mut() {
                    obs(round, &q);
                }
                add_vec(&q, &mask).expect("mask has the gradient's dimension")
            }
        };
        self.events.push(ClientEvent::Transmitted { round });
        Some(self.frame(Message::MaskedGradient {
            round,
            sample_count: self.sample_count,
            vector,
        }))
    }

    /// Answers a batched recovery request: one share or error per dropped id.
    pub fn serve_recovery(&mut self, round: u32, dropped: &[DeviceId], out: &mut Vec<Frame>) {
        if self.policy.absent(round) {
            return;
        }
        for &d in dropped {
            let result = match (self.received.get(&d), self.enclave.as_mut()) {
                (None, _) | (_, None) => Err(ErrorCode::NoShare),
                (Some(es), Some(enclave)) => match enclave.cmd_decrypt_share(d, es) {
                    Ok(share) => Ok(share.y),
                    Err(EnclaveError::Authentication) | Err(EnclaveError::Tamper) => Err(ErrorCode::Tamper),
                    Err(EnclaveError::UnknownPeer(_)) => Err(ErrorCode::NoShare),
                    Err(e) => {
                        self.note_enclave_error(&e);
                        Err(ErrorCode::NotReady)
                    }
                },
            };
            if self.crashed {
                return;
            }
            self.events.push(ClientEvent::Served {
                round,
                dropped: d,
                code: result.err(),
            });
            out.push(self.frame(match result {
                Ok(y) => Message::ShareResponse { dropped: d, y },
                Err(code) => Message::Error {
                    code,
                    subject: d,
                    detail: round,
                },
            }));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_parsing() {
        assert_eq!("none".parse::<DropoutPolicy>().unwrap(), DropoutPolicy::None);
        assert_eq!(
            "permanent:3-5".parse::<DropoutPolicy>().unwrap(),
            DropoutPolicy::Permanent([3, 4, 5].into())
        );
        assert_eq!(
            "permanent:2,9".parse::<DropoutPolicy>().unwrap(),
            DropoutPolicy::Permanent([2, 9].into())
        );
        assert_eq!(
            "crash:after-seal@2".parse::<DropoutPolicy>().unwrap(),
            DropoutPolicy::CrashAt {
                point: CrashPoint::Daemon(DaemonStep::AfterSeal),
                epoch: 2
            }
        );
        assert_eq!(
            "crash:enclave-mask-counter-committed".parse::<DropoutPolicy>().unwrap(),
            DropoutPolicy::CrashAt {
                point: CrashPoint::Enclave(KillPoint::MaskCounterCommitted),
                epoch: 1
            }
        );
        assert!("sometimes".parse::<DropoutPolicy>().is_err());
        assert!("crash:nowhere".parse::<DropoutPolicy>().is_err());
    }

    #[test]
    fn crash_point_slugs_are_unique_and_parse() {
        let all = CrashPoint::all();
        assert!(all.len() >= 12);
        let slugs: BTreeSet<String> = all.iter().map(|p| p.slug()).collect();
        assert_eq!(slugs.len(), all.len());
        for p in all {
            assert_eq!(p.slug().parse::<CrashPoint>().unwrap(), p);
        }
    }
}
