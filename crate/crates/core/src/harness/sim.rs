//! In-process cohort: one server and N clients exchanging frames through
//! per-node queues.
//!
//! Delivery proceeds in waves. All queued client-bound frames are handled
//! (clients in parallel, each in FIFO order), then all server-bound frames in
//! client-id order. When both queues are empty the server's current deadline
//! is taken to have expired. The schedule is therefore a pure function of the
//! configuration.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rayon::prelude::*;

use super::report::{ClientSummary, CrashRecord, RoundRecord, RunReport};
use crate::client::{ClientEvent, ClientNode, CrashPoint, DropoutPolicy};
use crate::config::{CohortConfig, Mode};
use crate::crypto::RootCa;
use crate::enclave::{footprint_formula, Phase};
use crate::field::FieldVector;
use crate::id::DeviceId;
use crate::protocol::{byte_accounting, classify, Direction, Frame, MessageKind, TraceEntry, TrafficPhase};
use crate::server::{RoundResult, ServerNode};
use crate::workload;

/// Deterministic simulation CA for a seed.
pub fn simulation_ca(seed: u64) -> RootCa {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(b"CHRONOS-sim-ca");
    h.update(seed.to_be_bytes());
    RootCa::from_seed(h.finalize().into())
}

#[derive(Default)]
pub struct RunOptions {
    /// Device directories go here; a temporary directory otherwise.
    pub state_dir: Option<PathBuf>,
    /// Overrides the policies derived from the configuration.
    pub policies: BTreeMap<DeviceId, DropoutPolicy>,
    /// Keep `MASKED_GRADIENT` payloads and the plaintext each client masked.
    pub capture_uplink: bool,
    /// Check persisted counters around every frame (crash experiments).
    pub check_counters: bool,
    /// In every round opened after a drop, inject a `MASKED_GRADIENT` on
    /// behalf of each client the server already declared dropped.
    pub replay_dropped: bool,
}

/// Default policies: the last `dropouts` clients are absent from
/// `dropout_from` on.
pub fn policies_from_config(cfg: &CohortConfig) -> BTreeMap<DeviceId, DropoutPolicy> {
    cfg.dropout_ids()
        .into_iter()
        .map(|id| {
            (
                id,
                DropoutPolicy::absent_from(cfg.dropout_from, cfg.rounds.max(cfg.dropout_from)),
            )
        })
        .collect()
}

#[derive(Default)]
pub struct Captured {
    /// `(sender, round, payload)` of every `MASKED_GRADIENT`.
    pub uplink: Vec<(DeviceId, u32, Vec<u8>)>,
    /// `(client, round, quantized vector)` observed just before masking.
    pub plaintext: Vec<(DeviceId, u32, FieldVector)>,
}

pub struct Simulation {
    cfg: CohortConfig,
    server: ServerNode,
    clients: Vec<ClientNode>,
    index: BTreeMap<DeviceId, usize>,
    inbox: Vec<VecDeque<Frame>>,
    to_server: VecDeque<(DeviceId, Frame)>,
    trace: Vec<TraceEntry>,
    results: Vec<RoundResult>,
    crashes: Vec<CrashRecord>,
    captured: Captured,
    plain_sink: Arc<Mutex<Vec<(DeviceId, u32, FieldVector)>>>,
    replayed: BTreeSet<(u32, u32)>,
    opts: RunOptions,
    _tmp: Option<tempfile::TempDir>,
}

impl Simulation {
    pub fn new(cfg: &CohortConfig, mut opts: RunOptions) -> std::io::Result<Self> {
        let (root, tmp) = match &opts.state_dir {
            Some(d) => (d.clone(), None),
            None => {
                let t = tempfile::Builder::new().prefix("chronos-").tempdir()?;
                (t.path().to_path_buf(), Some(t))
            }
        };
        let ca = simulation_ca(cfg.seed);
        let mut policies = policies_from_config(cfg);
        policies.append(&mut opts.policies);
        let plain_sink: Arc<Mutex<Vec<(DeviceId, u32, FieldVector)>>> = Arc::default();
        let ids = cfg.client_ids();
        let clients = ids
            .par_iter()
            .map(|id| {
                let policy = policies.get(id).cloned().unwrap_or_default();
                let mut c = ClientNode::provision(cfg, *id, root.join(id.to_string()), &ca, policy)
                    .map_err(|e| std::io::Error::other(e.to_string()))?;
                if opts.capture_uplink {
                    let sink = plain_sink.clone();
                    let me = *id;
                    c.observe_plaintext(move |r, q| sink.lock().unwrap().push((me, r, q.clone())));
                }
                Ok(c)
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        let index = ids.iter().enumerate().map(|(i, id)| (*id, i)).collect();
        Ok(Simulation {
            server: ServerNode::new(cfg, ids.clone()),
            inbox: vec![VecDeque::new(); clients.len()],
            clients,
            index,
            cfg: cfg.clone(),
            to_server: VecDeque::new(),
            trace: Vec::new(),
            results: Vec::new(),
            crashes: Vec::new(),
            captured: Captured::default(),
            plain_sink,
            replayed: BTreeSet::new(),
            opts,
            _tmp: tmp,
        })
    }

    pub fn server(&self) -> &ServerNode {
        &self.server
    }

    pub fn server_mut(&mut self) -> &mut ServerNode {
        &mut self.server
    }

    pub fn clients(&self) -> &[ClientNode] {
        &self.clients
    }

    pub fn client_mut(&mut self, id: DeviceId) -> Option<&mut ClientNode> {
        self.index.get(&id).map(|i| &mut self.clients[*i])
    }

    pub fn trace(&self) -> &[TraceEntry] {
        &self.trace
    }

    pub fn results(&self) -> &[RoundResult] {
        &self.results
    }

    pub fn captured(&self) -> &Captured {
        &self.captured
    }

    /// Plaintext vectors observed so far (also moved into [`Captured`] by
    /// [`Simulation::run`]).
    pub fn captured_plaintext(&self) -> Vec<(DeviceId, u32, FieldVector)> {
        self.plain_sink.lock().unwrap().clone()
    }

    fn phase_of(&self, f: &Frame) -> TrafficPhase {
        trace_phase(self.cfg.mode, f)
    }

    fn route(&mut self, out: Vec<(DeviceId, Frame)>) {
        let round = self.server.round_context();
        for (to, f) in out {
            if let Some(&i) = self.index.get(&to) {
                let round = frame_round(&f).unwrap_or(round);
                self.trace
                    .push(TraceEntry::new(&f, self.phase_of(&f), Direction::Downlink, to, round));
                self.inbox[i].push_back(f);
            }
        }
    }

    fn deliver_to_clients(&mut self) -> bool {
        if self.inbox.iter().all(VecDeque::is_empty) {
            return false;
        }
        let check = self.opts.check_counters;
        let inboxes: Vec<VecDeque<Frame>> = self.inbox.iter_mut().map(std::mem::take).collect();
        let outputs: Vec<(Vec<Frame>, Vec<CrashRecord>)> = self
            .clients
            .par_iter_mut()
            .zip(inboxes)
            .map(|(c, frames)| {
                let mut out = Vec::new();
                let mut crashes = Vec::new();
                for f in frames {
                    let before = if check { c.persisted_counter() } else { None };
                    out.extend(c.handle(&f));
                    if c.is_crashed() {
                        let rec = crash_and_restart(c, before, &f, &mut out);
                        crashes.push(rec);
                    }
                }
                (out, crashes)
            })
            .collect();
        for (i, (frames, crashes)) in outputs.into_iter().enumerate() {
            let id = self.clients[i].id();
            self.crashes.extend(crashes);
            for f in frames {
                self.to_server.push_back((id, f));
            }
        }
        true
    }

    fn deliver_to_server(&mut self) -> bool {
        if self.to_server.is_empty() {
            return false;
        }
        while let Some((from, f)) = self.to_server.pop_front() {
            let round = frame_round(&f).unwrap_or_else(|| self.server.round_context());
            self.trace
                .push(TraceEntry::new(&f, self.phase_of(&f), Direction::Uplink, from, round));
            if self.opts.capture_uplink && f.kind == MessageKind::MaskedGradient {
                self.captured.uplink.push((from, round, f.payload.clone()));
            }
            let out = self.server.handle(from, &f);
            self.route(out);
        }
        true
    }

    /// Delivers until no frame is in flight.
    pub fn settle(&mut self) {
        loop {
            let a = self.deliver_to_clients();
            let b = self.deliver_to_server();
            let c = self.opts.replay_dropped && self.replay_dropped();
            if !a && !b && !c {
                break;
            }
        }
        self.results.extend(self.server.drain_results());
    }

    /// Opens the first epoch.
    pub fn start(&mut self) {
        let out = self.server.start();
        self.route(out);
        self.settle();
    }

    /// Lets the server's current deadline pass.
    pub fn expire(&mut self) {
        let out = self.server.on_timeout();
        self.route(out);
        self.settle();
    }

    /// Queues, once per round, a well-formed gradient for the open round on
    /// behalf of every client the server already declared dropped.
    fn replay_dropped(&mut self) -> bool {
        let s = &self.server;
        if s.in_idle_phase() || s.is_finished() || s.round_context() == 0 {
            return false;
        }
        let (epoch, round) = (s.epoch(), s.round_context());
        let dropped: Vec<DeviceId> = s.registry().dropped_this_epoch.iter().copied().collect();
        if dropped.is_empty() || !self.replayed.insert((epoch, round)) {
            return false;
        }
        for d in dropped {
            let msg = crate::protocol::Message::MaskedGradient {
                round,
                sample_count: 1,
                vector: FieldVector::zeros(self.cfg.dim),
            };
            self.to_server.push_back((d, msg.into_frame(epoch, d)));
        }
        true
    }

    pub fn run_to_end(&mut self) {
        self.start();
        while !self.server.is_finished() {
            self.expire();
        }
    }

    /// Runs the whole schedule and compares every aggregate with the
    /// plaintext oracle.
    pub fn run(mut self) -> RunReport {
        let t0 = Instant::now();
        self.run_to_end();
        self.captured.plaintext = std::mem::take(&mut *self.plain_sink.lock().unwrap());
        let wall = t0.elapsed();
        self.report(wall.as_secs_f64() * 1e3)
    }

    /// Builds the report without consuming the simulation.
    pub fn report(&mut self, wall_ms: f64) -> RunReport {
        let cfg = &self.cfg;
        let rounds: Vec<RoundRecord> = self
            .results
            .par_iter()
            .map(|r| round_record(cfg, r, &self.trace))
            .collect();
        let accounting = byte_accounting(&self.trace);
        // The formula describes sealed storage; the software backend keeps
        // its seeds unsealed.
        let sealed_backend = matches!(cfg.mode, Mode::Chronos | Mode::Sync);
        let footprints: Vec<(DeviceId, u64)> = self
            .clients
            .iter()
            .filter(|_| sealed_backend)
            .filter_map(|c| {
                let e = c.enclave()?;
                (e.phase() == Phase::Sealed).then(|| (c.id(), e.persistent_footprint().unwrap_or(0)))
            })
            .collect();
        let members = self.server.registry().members.len().max(self.cfg.n);
        let clients = self
            .clients
            .iter()
            .map(|c| ClientSummary::from_events(c.id(), c.events()))
            .collect();
        let server_events = self.server.events().to_vec();
        RunReport::assemble(
            cfg,
            rounds,
            accounting,
            footprints,
            footprint_formula(members),
            clients,
            server_events,
            self.server.late_discarded(),
            self.crashes.clone(),
            &self.trace,
            wall_ms,
        )
    }
}

/// Traffic phase of a frame; in sync mode key establishment happens
/// inside every round and counts as active traffic.
pub fn trace_phase(mode: Mode, f: &Frame) -> TrafficPhase {
    match (classify(f), mode) {
        (TrafficPhase::Idle, Mode::Sync) => TrafficPhase::Active,
        (p, _) => p,
    }
}

/// Round number carried in a frame's own payload, if any.
pub fn frame_round(f: &Frame) -> Option<u32> {
    match f.kind {
        MessageKind::MaskedGradient | MessageKind::RecoveryRequest => {
            Some(u32::from_be_bytes(f.payload.get(..4)?.try_into().ok()?))
        }
        MessageKind::GlobalUpdate => {
            let r = u32::from_be_bytes(f.payload.get(..4)?.try_into().ok()?);
            let next = u32::from_be_bytes(f.payload.get(4..8)?.try_into().ok()?);
            Some(if r == 0 { next } else { r })
        }
        _ => None,
    }
}

pub(crate) fn crash_and_restart(
    c: &mut ClientNode,
    before: Option<(u32, u32)>,
    frame: &Frame,
    out: &mut Vec<Frame>,
) -> CrashRecord {
    let point = c
        .events()
        .iter()
        .rev()
        .find_map(|e| match e {
            ClientEvent::Crashed { point } => Some(*point),
            _ => None,
        })
        .expect("a crashed client records its crash point");
    let restart = c.restart();
    let after = c.persisted_counter();
    let phase = c.enclave().map(|e| e.phase());
    let counter_rewound = matches!((before, after), (Some((g0, c0)), Some((g1, c1))) if g0 == g1 && c1 < c0);
    // The counter file is the seal's commit record: if it exists the
    // session must have come back sealed.
    let half_sealed = restart.is_err() || (after.is_some() && phase != Some(Phase::Sealed));
    // A daemon that crashed mid-round resumes the round on restart.
    if point.is_active_phase() && restart.is_ok() {
        out.extend(c.handle(frame));
    }
    CrashRecord {
        client: c.id(),
        point,
        counter_before: before,
        counter_after: after,
        phase_after: phase,
        counter_rewound,
        half_sealed,
    }
}

pub(crate) fn round_record(cfg: &CohortConfig, r: &RoundResult, trace: &[TraceEntry]) -> RoundRecord {
    let (field_mismatches, max_abs_error) = match (&r.field_sum, &r.decoded) {
        (Some(sum), Some(decoded)) => {
            let oracle = workload::oracle_sum(cfg, &r.participants, r.round);
            let mismatches = sum.iter().zip(oracle.iter()).filter(|(a, b)| a != b).count();
            let mut real = vec![0.0f64; cfg.dim];
            for p in &r.participants {
                for (acc, v) in real.iter_mut().zip(workload::contribution(cfg, *p, r.round)) {
                    *acc += v;
                }
            }
            let max_err = decoded
                .iter()
                .zip(&real)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            (Some(mismatches), Some(max_err))
        }
        _ => (None, None),
    };
    let entries = trace.iter().filter(|e| e.round == r.round && e.epoch == r.epoch);
    RoundRecord::new(r, entries, field_mismatches, max_abs_error)
}

/// Runs one configuration end to end in process.
pub fn run_experiment(cfg: &CohortConfig) -> std::io::Result<RunReport> {
    Ok(Simulation::new(cfg, RunOptions::default())?.run())
}

/// Every client's `MASKED_GRADIENT` count per `(epoch, round)`; more than one
/// would mean a second mask for the same round left the device.
pub fn uplink_counts(trace: &[TraceEntry]) -> BTreeMap<(DeviceId, u32, u32), usize> {
    let mut m = BTreeMap::new();
    for e in trace.iter().filter(|e| e.kind == MessageKind::MaskedGradient) {
        *m.entry((e.client, e.epoch, e.round)).or_default() += 1;
    }
    m
}

/// Clients that reported ESTABLISHED in `epoch`.
pub fn established_in(trace: &[TraceEntry], epoch: u32) -> BTreeSet<DeviceId> {
    trace
        .iter()
        .filter(|e| e.kind == MessageKind::Established && e.epoch == epoch)
        .map(|e| e.client)
        .collect()
}

/// Crash points the matrix exercises: every daemon and enclave step.
pub fn crash_points() -> Vec<CrashPoint> {
    CrashPoint::all()
}
