//! Simulated Secure World.
//!
//! [`Enclave`] is a strictly encapsulated state machine that exposes the six
//! trusted-application commands and nothing else:
//!
//! | command            | phase required          | effect                                   |
//! |--------------------|-------------------------|------------------------------------------|
//! | `cmd_keygen`       | `Empty` / `Sealed`      | fresh X25519 key, signed public key out   |
//! | `cmd_compute_seeds`| `KeyHeld`               | verify peers, raw DH secrets kept inside  |
//! | `cmd_seal`         | `SeedsComputed`         | shares out, secrets sealed, `C <- 0`      |
//! | `cmd_generate_mask`| `Sealed`, `r > C`       | mask out, `C <- r` flushed before return  |
//! | `cmd_decrypt_share`| `Sealed`                | one peer's plaintext share out            |
//! | `cmd_peek_counter` | `Sealed`                | `C`, read only                            |
//!
//! Persistent state lives in a device directory (see [`storage`]). The sealed
//! seed set is AES-256-GCM under a key derived from the simulated hardware
//! unique key and the sealing generation, with a zero nonce: each generation
//! key encrypts exactly one seed set. The counter file doubles as the commit
//! record of a seal, so a crash at any point leaves the device either fully
//! sealed or empty.

pub mod storage;

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::Path;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;

use crate::crypto::{
    derive_keys, dh, keygen, shamir_split_at, sign_pk, unwrap_share, verify_pk, wrap_share, CryptoError, DeviceCert,
    DeviceIdentity, EncryptedShare, KeyPair, RootCa, ShamirShare, SharedSecret, SignedAnnounce,
};
use crate::field::FieldVector;
use crate::id::DeviceId;
use crate::masking::pairwise_mask;
use storage::{
    read_u32_be, DeviceDir, CERT_FILE, COUNTER_FILE, EPOCH_FILE, HUK_FILE, PEERS_FILE, ROOT_CA_FILE, SEED_SET_FILE,
};

const SEAL_INFO: &[u8] = b"CHRONOS-seal";
const IDENTITY_INFO: &[u8] = b"CHRONOS-identity";
pub const SEAL_TAG_LEN: usize = 16;
pub const COUNTER_LEN: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Empty,
    KeyHeld,
    SeedsComputed,
    Sealed,
}

/// Where seeds and the counter live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Backend {
    /// Sealed under the hardware key; counter not rewindable from outside.
    Trusted,
    /// Plain files and a counter the host can rewind. Models the
    /// software-only ablation.
    Software,
}

/// Instrumented crash sites inside enclave commands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum KillPoint {
    RotateCounterRemoved,
    KeygenEpochCommitted,
    SealBegin,
    SealStaged,
    SealSeedCommitted,
    SealPeersCommitted,
    SealCommitted,
    MaskComputed,
    MaskCounterStaged,
    MaskCounterCommitted,
}

impl KillPoint {
    pub const ALL: [KillPoint; 10] = [
        KillPoint::RotateCounterRemoved,
        KillPoint::KeygenEpochCommitted,
        KillPoint::SealBegin,
        KillPoint::SealStaged,
        KillPoint::SealSeedCommitted,
        KillPoint::SealPeersCommitted,
        KillPoint::SealCommitted,
        KillPoint::MaskComputed,
        KillPoint::MaskCounterStaged,
        KillPoint::MaskCounterCommitted,
    ];
}

#[derive(Debug, Error)]
pub enum EnclaveError {
    #[error("ERR_NOT_READY: no sealed key set")]
    NotReady,
    #[error("ERR_STALE_ROUND: round {round} <= counter {counter}")]
    StaleRound { round: u32, counter: u32 },
    #[error("{command} not allowed in phase {phase:?}")]
    State { command: &'static str, phase: Phase },
    #[error("key establishment failed: no peer passed verification")]
    EstablishmentFailed,
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("no pairwise key with peer {0}")]
    UnknownPeer(DeviceId),
    #[error("share authentication failed")]
    Authentication,
    #[error("sealed storage failed authentication")]
    Tamper,
    #[error("seal failed and was rolled back: {0}")]
    SealFailed(String),
    #[error("device not provisioned: {0}")]
    NotProvisioned(String),
    #[error("operation not supported by this backend")]
    Unsupported,
    #[error("killed at {0:?}")]
    Killed(KillPoint),
    #[error("storage: {0}")]
    Io(#[from] io::Error),
}

/// Outcome of `cmd_compute_seeds`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedReport {
    pub verified: usize,
    pub rejected: Vec<DeviceId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Excluded = 0,
    Peer = 1,
    Own = 2,
}

/// The cohort as listed at key establishment, in canonical order. A member's
/// Shamir evaluation point is its 1-based position here.
#[derive(Debug, Clone, PartialEq, Eq)]
struct CohortRecord {
    entries: Vec<(DeviceId, Role)>,
}

impl CohortRecord {
    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(2 + self.entries.len() * 9);
        out.extend_from_slice(&(self.entries.len() as u16).to_be_bytes());
        for (id, role) in &self.entries {
            out.extend_from_slice(&id.to_bytes());
            out.push(*role as u8);
        }
        out
    }

    fn from_bytes(b: &[u8]) -> Option<Self> {
        let n = u16::from_be_bytes(b.get(..2)?.try_into().ok()?) as usize;
        if b.len() != 2 + n * 9 {
            return None;
        }
        let entries = b[2..]
            .chunks_exact(9)
            .map(|c| {
                let role = match c[8] {
                    0 => Role::Excluded,
                    1 => Role::Peer,
                    2 => Role::Own,
                    _ => return None,
                };
                Some((DeviceId::from_bytes(c[..8].try_into().unwrap()), role))
            })
            .collect::<Option<Vec<_>>>()?;
        Some(CohortRecord { entries })
    }

    fn x_of(&self, id: DeviceId) -> Option<u8> {
        self.entries.iter().position(|(e, _)| *e == id).map(|i| (i + 1) as u8)
    }

    fn own_x(&self) -> Option<u8> {
        self.entries
            .iter()
            .position(|(_, r)| *r == Role::Own)
            .map(|i| (i + 1) as u8)
    }

    fn peers(&self) -> impl Iterator<Item = DeviceId> + '_ {
        self.entries.iter().filter(|(_, r)| *r == Role::Peer).map(|(id, _)| *id)
    }
}

/// Shamir evaluation point of `member` when the cohort is `members`.
pub fn cohort_x(members: &[DeviceId], member: DeviceId) -> Option<u8> {
    let mut sorted = members.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.iter().position(|m| *m == member).map(|i| (i + 1) as u8)
}

struct Pending {
    keypair: KeyPair,
    cohort: Option<CohortRecord>,
    secrets: BTreeMap<DeviceId, SharedSecret>,
}

pub struct Enclave {
    dir: DeviceDir,
    backend: Backend,
    huk: [u8; 32],
    identity: DeviceIdentity,
    root_ca: [u8; 32],
    phase: Phase,
    generation: u32,
    counter: Option<u32>,
    cohort: Option<CohortRecord>,
    pending: Option<Pending>,
    rng: ChaCha20Rng,
    kill_at: Option<KillPoint>,
    killed: Option<KillPoint>,
    boundary_log: Option<Vec<Vec<u8>>>,
}

impl fmt::Debug for Enclave {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Enclave")
            .field("device", &self.device())
            .field("backend", &self.backend)
            .field("phase", &self.phase)
            .field("generation", &self.generation)
            .field("counter", &self.counter)
            .finish_non_exhaustive()
    }
}

fn derive_identity_seed(huk: &[u8; 32]) -> [u8; 32] {
    let mut seed = [0u8; 32];
    Hkdf::<Sha256>::new(None, huk)
        .expand(IDENTITY_INFO, &mut seed)
        .expect("32 bytes is a valid HKDF length");
    seed
}

fn sealing_key(huk: &[u8; 32], generation: u32) -> [u8; 32] {
    let mut info = SEAL_INFO.to_vec();
    info.extend_from_slice(&generation.to_be_bytes());
    let mut key = [0u8; 32];
    Hkdf::<Sha256>::new(None, huk)
        .expand(&info, &mut key)
        .expect("32 bytes is a valid HKDF length");
    key
}

impl Enclave {
    /// Creates a device directory: fresh hardware key, CA-issued identity
    /// certificate and trust anchor.
    pub fn provision<R: RngCore + CryptoRng>(
        dir: impl AsRef<Path>,
        device: DeviceId,
        ca: &RootCa,
        backend: Backend,
        rng: &mut R,
    ) -> Result<Enclave, EnclaveError> {
        let dir = DeviceDir::new(dir.as_ref());
        dir.create()?;
        let mut huk = [0u8; 32];
        rng.fill_bytes(&mut huk);
        let vk = DeviceIdentity::verifying_key_for_seed(&derive_identity_seed(&huk));
        let cert = ca.issue(device, vk);
        dir.write_atomic(HUK_FILE, &huk)?;
        dir.write_atomic(CERT_FILE, &cert.to_bytes())?;
        dir.write_atomic(ROOT_CA_FILE, &ca.public())?;
        dir.write_atomic(EPOCH_FILE, &0u32.to_be_bytes())?;
        dir.remove(COUNTER_FILE)?;
        dir.remove(SEED_SET_FILE)?;
        dir.remove(PEERS_FILE)?;
        Enclave::open(dir.root(), backend, rng)
    }

    /// Starts a session on an existing device directory. Volatile state
    /// (a key held mid-establishment) does not survive a restart.
    pub fn open<R: RngCore>(dir: impl AsRef<Path>, backend: Backend, rng: &mut R) -> Result<Enclave, EnclaveError> {
        let dir = DeviceDir::new(dir.as_ref());
        let huk: [u8; 32] = dir
            .read(HUK_FILE)?
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| EnclaveError::NotProvisioned("missing or malformed huk.bin".into()))?;
        let cert = dir
            .read(CERT_FILE)?
            .and_then(|b| DeviceCert::from_bytes(&b).ok())
            .ok_or_else(|| EnclaveError::NotProvisioned("missing or malformed cert.bin".into()))?;
        let root_ca: [u8; 32] = dir
            .read(ROOT_CA_FILE)?
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| EnclaveError::NotProvisioned("missing or malformed root_ca.bin".into()))?;
        let identity = DeviceIdentity::new(derive_identity_seed(&huk), cert)
            .map_err(|e| EnclaveError::NotProvisioned(e.to_string()))?;
        let generation = dir
            .read(EPOCH_FILE)?
            .and_then(|b| read_u32_be(&b))
            .ok_or_else(|| EnclaveError::NotProvisioned("missing or malformed epoch.bin".into()))?;
        dir.discard_staged()?;

        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        let mut enclave = Enclave {
            dir,
            backend,
            huk,
            identity,
            root_ca,
            phase: Phase::Empty,
            generation,
            counter: None,
            cohort: None,
            pending: None,
            rng: ChaCha20Rng::from_seed(seed),
            kill_at: None,
            killed: None,
            boundary_log: None,
        };
        enclave.recover_persistent_phase()?;
        Ok(enclave)
    }

    /// Sealed iff the counter (the seal's commit record) exists and the seed
    /// set authenticates under the current generation.
    fn recover_persistent_phase(&mut self) -> Result<(), EnclaveError> {
        let counter = self.dir.read(COUNTER_FILE)?.and_then(|b| read_u32_be(&b));
        let cohort = self.dir.read(PEERS_FILE)?.and_then(|b| CohortRecord::from_bytes(&b));
        if let (Some(c), Some(cohort)) = (counter, cohort) {
            self.cohort = Some(cohort);
            if self.unseal().is_ok() {
                self.counter = Some(c);
                self.phase = Phase::Sealed;
                return Ok(());
            }
        }
        self.cohort = None;
        self.counter = None;
        self.phase = Phase::Empty;
        Ok(())
    }

    pub fn device(&self) -> DeviceId {
        self.identity.device()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn backend(&self) -> Backend {
        self.backend
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn dir(&self) -> &Path {
        self.dir.root()
    }

    /// Arms a one-shot crash at `point`. When reached the command fails with
    /// [`EnclaveError::Killed`] and the session refuses further commands;
    /// persistent state is left exactly as it was at that instant.
    pub fn arm_kill(&mut self, point: KillPoint) {
        self.kill_at = Some(point);
    }

    fn checkpoint(&mut self, point: KillPoint) -> Result<(), EnclaveError> {
        if self.kill_at == Some(point) {
            self.kill_at = None;
            self.killed = Some(point);
            self.pending = None;
            return Err(EnclaveError::Killed(point));
        }
        Ok(())
    }

    fn ensure_alive(&self) -> Result<(), EnclaveError> {
        match self.killed {
            Some(p) => Err(EnclaveError::Killed(p)),
            None => Ok(()),
        }
    }

    /// Starts recording every byte string returned across the boundary.
    pub fn record_boundary(&mut self) {
        self.boundary_log = Some(Vec::new());
    }

    pub fn boundary_log(&self) -> &[Vec<u8>] {
        self.boundary_log.as_deref().unwrap_or(&[])
    }

    fn emit(&mut self, bytes: &[u8]) {
        if let Some(log) = self.boundary_log.as_mut() {
            log.push(bytes.to_vec());
        }
    }

    /// Bytes of persistent secure state: sealed seed set plus counter.
    pub fn persistent_footprint(&self) -> io::Result<u64> {
        let mut total = 0;
        for name in [SEED_SET_FILE, COUNTER_FILE] {
            if self.dir.exists(name) {
                total += self.dir.size(name)?;
            }
        }
        Ok(total)
    }

    // ---- commands -------------------------------------------------------

    /// KEYGEN. From `Sealed` this first rotates: the old seed set and
    /// counter are destroyed and the sealing generation advances.
    pub fn cmd_keygen(&mut self) -> Result<SignedAnnounce, EnclaveError> {
        self.ensure_alive()?;
        match self.phase {
            Phase::KeyHeld | Phase::SeedsComputed => {
                return Err(EnclaveError::State {
                    command: "KEYGEN",
                    phase: self.phase,
                })
            }
            Phase::Sealed => {
                // Removing the counter first un-commits the old seal.
                self.dir.remove(COUNTER_FILE)?;
                self.counter = None;
                self.phase = Phase::Empty;
                self.checkpoint(KillPoint::RotateCounterRemoved)?;
                self.dir.remove(SEED_SET_FILE)?;
                self.dir.remove(PEERS_FILE)?;
                self.cohort = None;
            }
            Phase::Empty => {}
        }
        let next = self
            .generation
            .checked_add(1)
            .ok_or_else(|| EnclaveError::Parameter("sealing generation exhausted".into()))?;
        self.dir.write_atomic(EPOCH_FILE, &next.to_be_bytes())?;
        self.generation = next;
        self.checkpoint(KillPoint::KeygenEpochCommitted)?;

        let keypair = keygen(&mut self.rng);
        let announce = sign_pk(&keypair.public(), &self.identity);
        self.pending = Some(Pending {
            keypair,
            cohort: None,
            secrets: BTreeMap::new(),
        });
        self.phase = Phase::KeyHeld;
        self.emit(&announce.to_bytes());
        Ok(announce)
    }

    /// COMPUTE_SEEDS. `peers` is the announced cohort as relayed by the
    /// server; entries that fail verification are excluded.
    pub fn cmd_compute_seeds(&mut self, peers: &[(DeviceId, SignedAnnounce)]) -> Result<SeedReport, EnclaveError> {
        self.ensure_alive()?;
        if self.phase != Phase::KeyHeld {
            return Err(EnclaveError::State {
                command: "COMPUTE_SEEDS",
                phase: self.phase,
            });
        }
        let me = self.device();
        let mut listed: BTreeMap<DeviceId, Role> = BTreeMap::new();
        listed.insert(me, Role::Own);
        let pending = self.pending.as_mut().expect("KeyHeld implies a pending key");
        let mut secrets = BTreeMap::new();
        let mut rejected = Vec::new();
        for (id, announce) in peers {
            if *id == me || listed.contains_key(id) {
                continue;
            }
            let ok = verify_pk(announce, *id, &self.root_ca)
                .then(|| dh(pending.keypair.secret(), &announce.pk).ok())
                .flatten();
            match ok {
                Some(s) => {
                    secrets.insert(*id, s);
                    listed.insert(*id, Role::Peer);
                }
                None => {
                    rejected.push(*id);
                    listed.insert(*id, Role::Excluded);
                }
            }
        }
        if listed.len() > 255 {
            return Err(EnclaveError::Parameter(format!(
                "cohort of {} exceeds 255 members",
                listed.len()
            )));
        }
        if secrets.is_empty() {
            return Err(EnclaveError::EstablishmentFailed);
        }
        let verified = secrets.len();
        pending.cohort = Some(CohortRecord {
            entries: listed.into_iter().collect(),
        });
        pending.secrets = secrets;
        self.phase = Phase::SeedsComputed;
        let report = SeedReport { verified, rejected };
        self.emit(&(report.verified as u32).to_be_bytes());
        Ok(report)
    }

    /// SEAL(t). Returns one wrapped share per verified peer.
    pub fn cmd_seal(&mut self, t: usize) -> Result<Vec<(DeviceId, EncryptedShare)>, EnclaveError> {
        self.ensure_alive()?;
        if self.phase != Phase::SeedsComputed {
            return Err(EnclaveError::State {
                command: "SEAL",
                phase: self.phase,
            });
        }
        let pending = self.pending.as_ref().expect("SeedsComputed implies pending state");
        let n = pending.secrets.len();
        if t == 0 || t > n {
            return Err(EnclaveError::Parameter(format!("threshold {t} outside 1..={n}")));
        }
        let cohort = pending.cohort.clone().expect("SeedsComputed implies a cohort");

        // (1) shares of sk, one per verified peer, wrapped under k_enc.
        let peer_ids: Vec<DeviceId> = cohort.peers().collect();
        let xs: Vec<u8> = peer_ids.iter().map(|id| cohort.x_of(*id).unwrap()).collect();
        let shares = shamir_split_at(pending.keypair.secret(), t, &xs, &mut self.rng)
            .map_err(|e| EnclaveError::Parameter(e.to_string()))?;
        let mut wrapped = Vec::with_capacity(n);
        for (id, share) in peer_ids.iter().zip(&shares) {
            let keys = derive_keys(&pending.secrets[id]);
            wrapped.push((*id, wrap_share(share, &keys.k_enc, &mut self.rng)));
        }

        // (2) + (3) seal the secret set and initialise C <- 0.
        let cohort_bytes = cohort.to_bytes();
        let mut plain = Vec::with_capacity(n * 32);
        for id in &peer_ids {
            plain.extend_from_slice(&pending.secrets[id].0);
        }
        let blob = self.seal_blob(&plain, &cohort_bytes);
        plain.fill(0);

        self.checkpoint(KillPoint::SealBegin)?;
        if let Err(e) = self.persist_seal(&blob, &cohort_bytes) {
            if let EnclaveError::Killed(_) = e {
                return Err(e);
            }
            let _ = self.dir.remove(SEED_SET_FILE);
            let _ = self.dir.remove(PEERS_FILE);
            let _ = self.dir.discard_staged();
            return Err(EnclaveError::SealFailed(e.to_string()));
        }

        // (4) erase sk and the plaintext secrets.
        self.pending = None;
        self.cohort = Some(cohort);
        self.counter = Some(0);
        self.phase = Phase::Sealed;
        for (_, es) in &wrapped {
            self.emit(&es.to_bytes());
        }
        Ok(wrapped)
    }

    fn persist_seal(&mut self, blob: &[u8], cohort_bytes: &[u8]) -> Result<(), EnclaveError> {
        self.dir.stage(SEED_SET_FILE, blob)?;
        self.dir.stage(PEERS_FILE, cohort_bytes)?;
        self.dir.stage(COUNTER_FILE, &0u32.to_be_bytes())?;
        self.checkpoint(KillPoint::SealStaged)?;
        self.dir.commit(SEED_SET_FILE)?;
        self.checkpoint(KillPoint::SealSeedCommitted)?;
        self.dir.commit(PEERS_FILE)?;
        self.checkpoint(KillPoint::SealPeersCommitted)?;
        self.dir.commit(COUNTER_FILE)?;
        self.checkpoint(KillPoint::SealCommitted)?;
        Ok(())
    }

    fn seal_blob(&self, plain: &[u8], aad: &[u8]) -> Vec<u8> {
        match self.backend {
            Backend::Software => plain.to_vec(),
            Backend::Trusted => {
                let key = sealing_key(&self.huk, self.generation);
                Aes256Gcm::new(&key.into())
                    .encrypt(Nonce::from_slice(&[0u8; 12]), Payload { msg: plain, aad })
                    .expect("AES-GCM encryption cannot fail for in-memory buffers")
            }
        }
    }

    /// Reads and authenticates the seed set from storage.
    fn unseal(&self) -> Result<Vec<(DeviceId, SharedSecret)>, EnclaveError> {
        let cohort = self.cohort.as_ref().ok_or(EnclaveError::NotReady)?;
        let blob = self.dir.read(SEED_SET_FILE)?.ok_or(EnclaveError::Tamper)?;
        let plain = match self.backend {
            Backend::Software => blob,
            Backend::Trusted => {
                let key = sealing_key(&self.huk, self.generation);
                Aes256Gcm::new(&key.into())
                    .decrypt(
                        Nonce::from_slice(&[0u8; 12]),
                        Payload {
                            msg: &blob,
                            aad: &cohort.to_bytes(),
                        },
                    )
                    .map_err(|_| EnclaveError::Tamper)?
            }
        };
        let peers: Vec<DeviceId> = cohort.peers().collect();
        if plain.len() != peers.len() * 32 {
            return Err(EnclaveError::Tamper);
        }
        Ok(peers
            .into_iter()
            .zip(plain.chunks_exact(32))
            .map(|(id, c)| (id, SharedSecret(c.try_into().unwrap())))
            .collect())
    }

    fn require_sealed(&self) -> Result<(), EnclaveError> {
        self.ensure_alive()?;
        match self.phase {
            Phase::Sealed => Ok(()),
            _ => Err(EnclaveError::NotReady),
        }
    }

    /// GENERATE_MASK(D, r). The counter is durably advanced to `r` before
    /// the mask leaves the enclave.
    pub fn cmd_generate_mask(&mut self, dim: usize, round: u32) -> Result<FieldVector, EnclaveError> {
        self.require_sealed()?;
        let counter = self.counter.expect("Sealed implies a counter");
        if round <= counter {
            return Err(EnclaveError::StaleRound { round, counter });
        }
        let secrets = self.unseal()?;
        let keys: Vec<(DeviceId, [u8; 32])> = secrets.iter().map(|(id, s)| (*id, derive_keys(s).k_prg)).collect();
        let mask = pairwise_mask(self.device(), keys.iter().map(|(id, k)| (*id, k)), round, dim);

        self.checkpoint(KillPoint::MaskComputed)?;
        self.dir.stage(COUNTER_FILE, &round.to_be_bytes())?;
        self.checkpoint(KillPoint::MaskCounterStaged)?;
        self.dir.commit(COUNTER_FILE)?;
        self.counter = Some(round);
        self.checkpoint(KillPoint::MaskCounterCommitted)?;

        if self.boundary_log.is_some() {
            let bytes = mask.to_le_bytes();
            self.emit(&bytes);
        }
        Ok(mask)
    }

    /// DECRYPT_SHARE(i, ct): unwraps the share `dropped` dealt to this device.
    pub fn cmd_decrypt_share(&mut self, dropped: DeviceId, es: &EncryptedShare) -> Result<ShamirShare, EnclaveError> {
        self.require_sealed()?;
        let secrets = self.unseal()?;
        let secret = secrets
            .iter()
            .find(|(id, _)| *id == dropped)
            .map(|(_, s)| s)
            .ok_or(EnclaveError::UnknownPeer(dropped))?;
        let x = self
            .cohort
            .as_ref()
            .and_then(|c| c.own_x())
            .ok_or(EnclaveError::Tamper)?;
        let share = unwrap_share(es, x, &derive_keys(secret).k_enc).map_err(|e| match e {
            CryptoError::Authentication => EnclaveError::Authentication,
            other => EnclaveError::Parameter(other.to_string()),
        })?;
        self.emit(&share.y);
        Ok(share)
    }

    /// PEEK_COUNTER.
    pub fn cmd_peek_counter(&mut self) -> Result<u32, EnclaveError> {
        self.require_sealed()?;
        let c = self.counter.expect("Sealed implies a counter");
        self.emit(&c.to_be_bytes());
        Ok(c)
    }

    /// Host-side counter rewind. Only the software backend allows it; with
    /// trusted storage the counter is outside the host's reach.
    pub fn rewind_counter(&mut self, value: u32) -> Result<(), EnclaveError> {
        self.require_sealed()?;
        match self.backend {
            Backend::Trusted => Err(EnclaveError::Unsupported),
            Backend::Software => {
                self.dir.write_atomic(COUNTER_FILE, &value.to_be_bytes())?;
                self.counter = Some(value);
                Ok(())
            }
        }
    }
}

/// Persistent secure-storage size for a cohort of `n`: `(n-1)*32 + 16 + 4`.
pub fn footprint_formula(n: usize) -> usize {
    n.saturating_sub(1) * 32 + SEAL_TAG_LEN + COUNTER_LEN
}

#[cfg(test)]
mod tests;
