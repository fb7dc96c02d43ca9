//! Run reports: JSON lines plus a human-readable summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::client::{ClientEvent, CrashPoint, SkipReason};
use crate::config::{CohortConfig, FileConfig};
use crate::enclave::Phase;
use crate::id::DeviceId;
use crate::protocol::{byte_accounting, Accounting, Direction, MessageKind, TraceEntry, TrafficPhase};
use crate::server::{RoundOutcome, RoundResult, ServerEvent};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Traffic {
    pub frames: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    pub epoch: u32,
    pub round: u32,
    pub outcome: String,
    pub detail: RoundOutcome,
    pub participants: usize,
    pub corrected: Vec<DeviceId>,
    pub reconstructed: Vec<DeviceId>,
    /// Elements where the server's field aggregate differs from the oracle.
    pub field_mismatches: Option<usize>,
    /// Largest per-element gap between the decoded and the real sum.
    pub max_abs_error: Option<f64>,
    pub active_up: Traffic,
    pub active_down: Traffic,
    pub recovery_up: Traffic,
    pub recovery_down: Traffic,
    pub recovery_share_bytes: u64,
    /// Relayed key-exchange frames (`SHARE_RELAY` + `SHARE_DELIVER`)
    /// attributed to this round.
    pub relay_frames: u64,
    /// `MASKED_GRADIENT` frames received for this round.
    pub data_uplinks: u64,
    pub sample_total: u64,
}

impl RoundRecord {
    pub fn new<'a>(
        r: &RoundResult,
        entries: impl Iterator<Item = &'a TraceEntry>,
        field_mismatches: Option<usize>,
        max_abs_error: Option<f64>,
    ) -> Self {
        let mut rec = RoundRecord {
            epoch: r.epoch,
            round: r.round,
            outcome: r.outcome.label(),
            detail: r.outcome.clone(),
            participants: r.participants.len(),
            corrected: r.corrected.clone(),
            reconstructed: r.reconstructed.clone(),
            field_mismatches,
            max_abs_error,
            active_up: Traffic::default(),
            active_down: Traffic::default(),
            recovery_up: Traffic::default(),
            recovery_down: Traffic::default(),
            recovery_share_bytes: 0,
            relay_frames: 0,
            data_uplinks: 0,
            sample_total: r.sample_total,
        };
        for e in entries {
            let slot = match (e.phase, e.direction) {
                (TrafficPhase::Active, Direction::Uplink) => &mut rec.active_up,
                (TrafficPhase::Active, Direction::Downlink) => &mut rec.active_down,
                (TrafficPhase::Recovery, Direction::Uplink) => &mut rec.recovery_up,
                (TrafficPhase::Recovery, Direction::Downlink) => &mut rec.recovery_down,
                (TrafficPhase::Idle, _) => continue,
            };
            slot.frames += 1;
            slot.bytes += e.bytes as u64;
            if e.phase == TrafficPhase::Recovery {
                rec.recovery_share_bytes += e.share_bytes as u64;
            }
            match e.kind {
                MessageKind::ShareRelay | MessageKind::ShareDeliver => rec.relay_frames += 1,
                MessageKind::MaskedGradient => rec.data_uplinks += 1,
                _ => {}
            }
        }
        rec
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ClientSummary {
    pub client: DeviceId,
    pub transmitted: usize,
    pub skipped_not_established: usize,
    pub skipped_not_ready: usize,
    pub skipped_stale: usize,
    pub absent: usize,
    pub established_epochs: Vec<u32>,
    pub aborted_epochs: Vec<u32>,
    pub crashes: usize,
    pub shares_served: usize,
}

impl ClientSummary {
    pub fn from_events(client: DeviceId, events: &[ClientEvent]) -> Self {
        let mut s = ClientSummary {
            client,
            transmitted: 0,
            skipped_not_established: 0,
            skipped_not_ready: 0,
            skipped_stale: 0,
            absent: 0,
            established_epochs: Vec::new(),
            aborted_epochs: Vec::new(),
            crashes: 0,
            shares_served: 0,
        };
        for e in events {
            match e {
                ClientEvent::Transmitted { .. } => s.transmitted += 1,
                ClientEvent::Skipped { reason, .. } => match reason {
                    SkipReason::NotEstablished => s.skipped_not_established += 1,
                    SkipReason::NotReady => s.skipped_not_ready += 1,
                    SkipReason::StaleRound { .. } => s.skipped_stale += 1,
                },
                ClientEvent::Absent { .. } => s.absent += 1,
                ClientEvent::Established { epoch, .. } => s.established_epochs.push(*epoch),
                ClientEvent::EstablishmentAborted { epoch, .. } => s.aborted_epochs.push(*epoch),
                ClientEvent::Crashed { .. } => s.crashes += 1,
                ClientEvent::Served { code: None, .. } => s.shares_served += 1,
                _ => {}
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CrashRecord {
    pub client: DeviceId,
    pub point: CrashPoint,
    pub counter_before: Option<(u32, u32)>,
    pub counter_after: Option<(u32, u32)>,
    pub phase_after: Option<Phase>,
    pub counter_rewound: bool,
    pub half_sealed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Verdict {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochTraffic {
    pub epoch: u32,
    pub idle_frames: u64,
    pub idle_bytes: u64,
    pub relay_frames: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: FileConfig,
    pub rounds: Vec<RoundRecord>,
    pub epochs: Vec<EpochTraffic>,
    pub accounting: Accounting,
    pub footprints: Vec<(DeviceId, u64)>,
    pub footprint_formula: usize,
    pub clients: Vec<ClientSummary>,
    pub server_events: Vec<ServerEvent>,
    pub late_discarded: u64,
    pub crashes: Vec<CrashRecord>,
    /// `MASKED_GRADIENT` frames per `(client, epoch, round)` that exceeded one.
    pub duplicate_uplinks: usize,
    pub verdicts: Vec<Verdict>,
    /// Informational only.
    pub wall_ms: f64,
}

impl RunReport {
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        cfg: &CohortConfig,
        rounds: Vec<RoundRecord>,
        accounting: Accounting,
        footprints: Vec<(DeviceId, u64)>,
        footprint_formula: usize,
        clients: Vec<ClientSummary>,
        server_events: Vec<ServerEvent>,
        late_discarded: u64,
        crashes: Vec<CrashRecord>,
        trace: &[TraceEntry],
        wall_ms: f64,
    ) -> RunReport {
        let mut by_epoch: BTreeMap<u32, Vec<&TraceEntry>> = BTreeMap::new();
        for e in trace.iter().filter(|e| e.phase == TrafficPhase::Idle) {
            by_epoch.entry(e.epoch).or_default().push(e);
        }
        let epochs = by_epoch
            .into_iter()
            .map(|(epoch, es)| {
                let acc = byte_accounting(es.iter().copied());
                EpochTraffic {
                    epoch,
                    idle_frames: acc.total.frames,
                    idle_bytes: acc.total.bytes,
                    relay_frames: acc.kind(MessageKind::ShareRelay).frames + acc.kind(MessageKind::ShareDeliver).frames,
                }
            })
            .collect();
        let duplicate_uplinks = super::sim::uplink_counts(trace).values().filter(|c| **c > 1).count();
        let mut report = RunReport {
            config: cfg.to_file_config(),
            rounds,
            epochs,
            accounting,
            footprints,
            footprint_formula,
            clients,
            server_events,
            late_discarded,
            crashes,
            duplicate_uplinks,
            verdicts: Vec::new(),
            wall_ms,
        };
        report.verdicts = report.standard_verdicts(cfg);
        report
    }

    fn standard_verdicts(&self, cfg: &CohortConfig) -> Vec<Verdict> {
        let mut v = Vec::new();
        let aggregated: Vec<&RoundRecord> = self.rounds.iter().filter(|r| r.detail.has_aggregate()).collect();
        let bad: Vec<u32> = aggregated
            .iter()
            .filter(|r| r.field_mismatches != Some(0))
            .map(|r| r.round)
            .collect();
        v.push(Verdict::new(
            "aggregate-exact",
            bad.is_empty(),
            format!("{} aggregated rounds, mismatching: {bad:?}", aggregated.len()),
        ));
        let bound = cfg.quant.error_bound(cfg.n as u32) + 1e-9;
        let worst = aggregated.iter().filter_map(|r| r.max_abs_error).fold(0.0f64, f64::max);
        v.push(Verdict::new(
            "quantization-bound",
            worst <= bound,
            format!("max |decoded - real| = {worst:.3e}, bound {bound:.3e}"),
        ));
        let off: Vec<&(DeviceId, u64)> = self
            .footprints
            .iter()
            .filter(|(_, b)| *b as usize != self.footprint_formula)
            .collect();
        v.push(Verdict::new(
            "footprint",
            off.is_empty(),
            format!(
                "formula {} bytes, {} sealed devices, off: {off:?}",
                self.footprint_formula,
                self.footprints.len()
            ),
        ));
        v.push(Verdict::new(
            "single-uplink",
            self.duplicate_uplinks == 0,
            format!(
                "{} (client, round) pairs with more than one MASKED_GRADIENT",
                self.duplicate_uplinks
            ),
        ));
        let rewinds = self.crashes.iter().filter(|c| c.counter_rewound).count();
        let half = self.crashes.iter().filter(|c| c.half_sealed).count();
        v.push(Verdict::new(
            "crash-safety",
            rewinds == 0 && half == 0,
            format!(
                "{} crashes, {rewinds} counter rewinds, {half} half-sealed",
                self.crashes.len()
            ),
        ));
        v
    }

    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn outcome_counts(&self) -> BTreeMap<String, usize> {
        let mut m = BTreeMap::new();
        for r in &self.rounds {
            *m.entry(r.outcome.clone()).or_default() += 1;
        }
        m
    }

    /// One JSON object per round, then one summary object.
    pub fn to_json_lines(&self) -> String {
        #[derive(Serialize)]
        struct Line<'a, T: Serialize> {
            r#type: &'a str,
            #[serde(flatten)]
            body: &'a T,
        }
        let mut out = String::new();
        for r in &self.rounds {
            out.push_str(
                &serde_json::to_string(&Line {
                    r#type: "round",
                    body: r,
                })
                .expect("serializable"),
            );
            out.push('\n');
        }
        #[derive(Serialize)]
        struct Summary<'a> {
            config: &'a FileConfig,
            outcomes: BTreeMap<String, usize>,
            epochs: &'a [EpochTraffic],
            accounting: &'a Accounting,
            footprint_formula: usize,
            footprints: &'a [(DeviceId, u64)],
            clients: &'a [ClientSummary],
            late_discarded: u64,
            crashes: &'a [CrashRecord],
            duplicate_uplinks: usize,
            verdicts: &'a [Verdict],
            wall_ms: f64,
        }
        let s = Summary {
            config: &self.config,
            outcomes: self.outcome_counts(),
            epochs: &self.epochs,
            accounting: &self.accounting,
            footprint_formula: self.footprint_formula,
            footprints: &self.footprints,
            clients: &self.clients,
            late_discarded: self.late_discarded,
            crashes: &self.crashes,
            duplicate_uplinks: self.duplicate_uplinks,
            verdicts: &self.verdicts,
            wall_ms: self.wall_ms,
        };
        out.push_str(
            &serde_json::to_string(&Line {
                r#type: "summary",
                body: &s,
            })
            .expect("serializable"),
        );
        out.push('\n');
        out
    }

    pub fn summary_table(&self) -> String {
        let c = &self.config;
        let mut s = String::new();
        let _ = writeln!(
            s,
            "mode={} n={} t={} rounds={} epoch_len={} dim={} seed={}",
            c.mode, c.n, c.t, c.rounds, c.epoch_len, c.dim, c.seed
        );
        let _ = writeln!(
            s,
            "{:>5} {:>5} {:<13} {:>4} {:>9} {:>10} {:>9} {:>10} {:>8}",
            "epoch", "round", "outcome", "part", "up_frm", "up_bytes", "down_frm", "rec_share", "mismatch"
        );
        for r in &self.rounds {
            let _ = writeln!(
                s,
                "{:>5} {:>5} {:<13} {:>4} {:>9} {:>10} {:>9} {:>10} {:>8}",
                r.epoch,
                r.round,
                r.outcome,
                r.participants,
                r.active_up.frames,
                r.active_up.bytes,
                r.active_down.frames,
                r.recovery_share_bytes,
                r.field_mismatches.map(|m| m.to_string()).unwrap_or_else(|| "-".into()),
            );
        }
        for p in [TrafficPhase::Idle, TrafficPhase::Active, TrafficPhase::Recovery] {
            let t = self.accounting.phase(p);
            let _ = writeln!(s, "{:<9} frames={:<8} bytes={}", format!("{p:?}"), t.frames, t.bytes);
        }
        let _ = writeln!(s, "footprint formula = {} bytes", self.footprint_formula);
        for v in &self.verdicts {
            let _ = writeln!(s, "[{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        }
        let _ = writeln!(s, "wall time {:.1} ms (informational)", self.wall_ms);
        s
    }

    /// Report fields that must be identical across reruns of one
    /// configuration: everything except wall time.
    pub fn deterministic_view(&self) -> String {
        let mut r = self.clone();
        r.wall_ms = 0.0;
        r.to_json_lines()
    }
}
