//! Multi-run experiments: mode comparison, crash matrix, freshness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::report::{RunReport, Verdict};
use super::sim::{crash_points, RunOptions, Simulation};
use crate::client::{ClientEvent, CrashPoint, DropoutPolicy, SkipReason};
use crate::config::{CohortConfig, ConfigError, Mode};
use crate::crypto::{RootCa, SignedAnnounce};
use crate::enclave::{Backend, Enclave, EnclaveError};
use crate::field::{quantize, sub_vec, FieldVector};
use crate::id::DeviceId;
use crate::protocol::{Message, MessageKind};
use crate::workload;

/// Default threshold for a cohort of `n`: `floor(2n/3)`, at least 1.
pub fn default_threshold(n: usize) -> usize {
    (2 * n / 3).clamp(1, n.saturating_sub(1).max(1))
}

fn with_cohort(base: &CohortConfig, n: usize, mode: Mode) -> Result<CohortConfig, ConfigError> {
    let mut f = base.to_file_config();
    f.n = n;
    f.t = default_threshold(n);
    f.quorum = None;
    f.mode = mode;
    f.dropouts = f.dropouts.min(n);
    CohortConfig::from_file_config(f)
}

// ---- mode comparison -----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRow {
    pub mode: Mode,
    pub n: usize,
    pub t: usize,
    pub rounds: usize,
    /// Rounds whose aggregate was produced.
    pub aggregated: usize,
    pub active_frames: u64,
    pub active_bytes: u64,
    pub data_uplinks: u64,
    /// Relayed key-exchange frames counted in rounds (sync mode).
    pub round_relay_frames: u64,
    pub idle_frames: u64,
    pub idle_bytes: u64,
    /// `SHARE_RELAY` uplinks in the worst round.
    pub min_round_relays: u64,
    pub exact: bool,
    /// Informational only.
    pub wall_ms: f64,
}

impl ScalingRow {
    pub fn active_frames_per_round(&self) -> f64 {
        self.active_frames as f64 / self.rounds.max(1) as f64
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingReport {
    pub rows: Vec<ScalingRow>,
    pub verdicts: Vec<Verdict>,
}

fn scaling_row(cfg: &CohortConfig) -> std::io::Result<ScalingRow> {
    let t0 = Instant::now();
    let sim = Simulation::new(cfg, RunOptions::default())?;
    let report = sim.run();
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let relays_per_round = relay_uplinks_per_round(&report);
    let idle = report
        .epochs
        .iter()
        .fold((0, 0), |(f, b), e| (f + e.idle_frames, b + e.idle_bytes));
    Ok(ScalingRow {
        mode: cfg.mode,
        n: cfg.n,
        t: cfg.t,
        rounds: report.rounds.len(),
        aggregated: report.rounds.iter().filter(|r| r.detail.has_aggregate()).count(),
        active_frames: report
            .rounds
            .iter()
            .map(|r| r.active_up.frames + r.active_down.frames)
            .sum(),
        active_bytes: report
            .rounds
            .iter()
            .map(|r| r.active_up.bytes + r.active_down.bytes)
            .sum(),
        data_uplinks: report.rounds.iter().map(|r| r.data_uplinks).sum(),
        round_relay_frames: report.rounds.iter().map(|r| r.relay_frames).sum(),
        idle_frames: idle.0,
        idle_bytes: idle.1,
        min_round_relays: relays_per_round.values().copied().min().unwrap_or(0),
        exact: report
            .verdicts
            .iter()
            .find(|v| v.name == "aggregate-exact")
            .is_some_and(|v| v.pass),
        wall_ms,
    })
}

/// `SHARE_RELAY` uplinks per round, counted from the round records.
/// `SHARE_RELAY` and `SHARE_DELIVER` come in pairs, one each way.
fn relay_uplinks_per_round(report: &RunReport) -> BTreeMap<u32, u64> {
    report.rounds.iter().map(|r| (r.round, r.relay_frames / 2)).collect()
}

/// Runs every mode at every cohort size in `ns` and checks the frame
/// counts: one data uplink per client per round, linear growth of the
/// masked active phase, and at least `N(N-1)` relays per synchronous round.
pub fn compare_modes(base: &CohortConfig, ns: &[usize], modes: &[Mode]) -> Result<ScalingReport, String> {
    let mut base = base.clone();
    base.dropouts = 0;
    let mut rows = Vec::new();
    for &mode in modes {
        for &n in ns {
            let cfg = with_cohort(&base, n, mode).map_err(|e| format!("n = {n}, {mode}: {e}"))?;
            rows.push(scaling_row(&cfg).map_err(|e| e.to_string())?);
        }
    }
    let mut verdicts = Vec::new();
    for mode in [Mode::Chronos, Mode::ChronosSw] {
        let rs: Vec<&ScalingRow> = rows.iter().filter(|r| r.mode == mode).collect();
        if rs.is_empty() {
            continue;
        }
        let one_uplink = rs.iter().all(|r| r.data_uplinks == (r.n * r.rounds) as u64);
        verdicts.push(Verdict::new(
            format!("{mode}: one data uplink per client per round"),
            one_uplink,
            rs.iter()
                .map(|r| format!("N={}: {} uplinks / {} rounds", r.n, r.data_uplinks, r.rounds))
                .collect::<Vec<_>>()
                .join(", "),
        ));
        // Active frames per round = a*N exactly, with a the same for every N.
        let per_client: Vec<(usize, u64, bool)> = rs
            .iter()
            .map(|r| {
                let denom = (r.n * r.rounds) as u64;
                (r.n, r.active_frames / denom.max(1), r.active_frames % denom.max(1) == 0)
            })
            .collect();
        let linear = per_client.iter().all(|(_, a, whole)| *whole && *a == per_client[0].1);
        verdicts.push(Verdict::new(
            format!("{mode}: active frames linear in N"),
            linear,
            per_client
                .iter()
                .map(|(n, a, _)| format!("N={n}: {a}/client/round"))
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    let sync: Vec<&ScalingRow> = rows.iter().filter(|r| r.mode == Mode::Sync).collect();
    if !sync.is_empty() {
        let ok = sync.iter().all(|r| r.min_round_relays >= (r.n * (r.n - 1)) as u64);
        verdicts.push(Verdict::new(
            "sync: at least N(N-1) relayed frames per round",
            ok,
            sync.iter()
                .map(|r| format!("N={}: min {} (N(N-1)={})", r.n, r.min_round_relays, r.n * (r.n - 1)))
                .collect::<Vec<_>>()
                .join(", "),
        ));
    }
    verdicts.push(Verdict::new(
        "all aggregates exact",
        rows.iter().all(|r| r.exact),
        format!("{} runs", rows.len()),
    ));
    Ok(ScalingReport { rows, verdicts })
}

impl ScalingReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("serializable"));
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&self.verdicts).expect("serializable"));
        out.push('\n');
        out
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<11} {:>3} {:>3} {:>12} {:>14} {:>12} {:>11} {:>12} {:>10}",
            "mode", "N", "t", "act_frm/rnd", "act_bytes/rnd", "uplinks/rnd", "relays/rnd", "idle_frames", "wall_ms"
        );
        for r in &self.rows {
            let rounds = r.rounds.max(1) as f64;
            let _ = writeln!(
                s,
                "{:<11} {:>3} {:>3} {:>12.1} {:>14.1} {:>12.1} {:>11.1} {:>12} {:>10.1}",
                r.mode.as_str(),
                r.n,
                r.t,
                r.active_frames_per_round(),
                r.active_bytes as f64 / rounds,
                r.data_uplinks as f64 / rounds,
                r.round_relay_frames as f64 / rounds,
                r.idle_frames,
                r.wall_ms,
            );
        }
        for v in &self.verdicts {
            let _ = writeln!(s, "[{}] {}: {}", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail);
        }
        s.push_str("wall-clock columns are informational\n");
        s
    }
}

// ---- crash matrix --------------------------------------------------------

/// Cohort used for every crash trial: three epochs of two rounds, the
/// crash armed in the second so that key rotation is exercised.
pub fn crash_trial_config(base: &CohortConfig, rep: u32) -> CohortConfig {
    let mut f = base.to_file_config();
    f.n = 4;
    f.t = 2;
    f.quorum = Some(3);
    f.epoch_len = 2;
    f.rounds = 6;
    f.dim = f.dim.min(16);
    f.mode = match f.mode {
        Mode::ChronosSw => Mode::ChronosSw,
        _ => Mode::Chronos,
    };
    f.dropouts = 0;
    f.seed = base.seed.wrapping_add(rep as u64);
    CohortConfig::from_file_config(f).expect("crash trial parameters are valid")
}

pub const CRASH_EPOCH: u32 = 2;

#[derive(Debug, Clone, Serialize)]
pub struct CrashTrial {
    pub point: String,
    pub rep: u32,
    pub victim: DeviceId,
    pub fired: bool,
    pub counter_rewinds: usize,
    pub half_sealed: usize,
    pub duplicate_uplinks: usize,
    pub aggregate_mismatches: usize,
    /// Rounds the victim refused to re-mask after restarting.
    pub stale_skips: usize,
    pub reestablished: bool,
}

impl CrashTrial {
    pub fn clean(&self) -> bool {
        self.fired
            && self.counter_rewinds == 0
            && self.half_sealed == 0
            && self.duplicate_uplinks == 0
            && self.aggregate_mismatches == 0
            && self.reestablished
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrashRow {
    pub point: String,
    pub reps: u32,
    pub fired: u32,
    pub counter_rewinds: usize,
    pub half_sealed: usize,
    pub duplicate_uplinks: usize,
    pub aggregate_mismatches: usize,
    pub stale_skips: usize,
    pub reestablished: u32,
}

impl CrashRow {
    pub fn pass(&self) -> bool {
        self.fired == self.reps
            && self.counter_rewinds == 0
            && self.half_sealed == 0
            && self.duplicate_uplinks == 0
            && self.aggregate_mismatches == 0
            && self.reestablished == self.reps
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CrashMatrix {
    pub reps: u32,
    pub rows: Vec<CrashRow>,
}

pub fn crash_trial(base: &CohortConfig, point: CrashPoint, rep: u32) -> std::io::Result<CrashTrial> {
    let cfg = crash_trial_config(base, rep);
    let victim = DeviceId(rep as u64 % cfg.n as u64 + 1);
    let mut opts = RunOptions {
        check_counters: true,
        ..RunOptions::default()
    };
    opts.policies.insert(
        victim,
        DropoutPolicy::CrashAt {
            point,
            epoch: CRASH_EPOCH,
        },
    );
    let report = Simulation::new(&cfg, opts)?.run();
    let summary = report.clients.iter().find(|c| c.client == victim);
    Ok(CrashTrial {
        point: point.slug(),
        rep,
        victim,
        fired: report.crashes.iter().any(|c| c.client == victim && c.point == point),
        counter_rewinds: report.crashes.iter().filter(|c| c.counter_rewound).count(),
        half_sealed: report.crashes.iter().filter(|c| c.half_sealed).count(),
        duplicate_uplinks: report.duplicate_uplinks,
        aggregate_mismatches: report
            .rounds
            .iter()
            .filter(|r| r.field_mismatches.is_some_and(|m| m > 0))
            .count(),
        stale_skips: summary.map_or(0, |s| s.skipped_stale),
        reestablished: summary.is_some_and(|s| s.established_epochs.contains(&(CRASH_EPOCH + 1))),
    })
}

/// Every crash point, `reps` seeded repetitions each.
pub fn crash_matrix(base: &CohortConfig, reps: u32) -> std::io::Result<(CrashMatrix, Vec<CrashTrial>)> {
    let jobs: Vec<(CrashPoint, u32)> = crash_points()
        .into_iter()
        .flat_map(|p| (0..reps).map(move |r| (p, r)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|(p, r)| crash_trial(base, *p, *r))
        .collect::<std::io::Result<Vec<_>>>()?;
    let rows = crash_points()
        .into_iter()
        .map(|p| {
            let slug = p.slug();
            let ts: Vec<&CrashTrial> = trials.iter().filter(|t| t.point == slug).collect();
            CrashRow {
                point: slug,
                reps,
                fired: ts.iter().filter(|t| t.fired).count() as u32,
                counter_rewinds: ts.iter().map(|t| t.counter_rewinds).sum(),
                half_sealed: ts.iter().map(|t| t.half_sealed).sum(),
                duplicate_uplinks: ts.iter().map(|t| t.duplicate_uplinks).sum(),
                aggregate_mismatches: ts.iter().map(|t| t.aggregate_mismatches).sum(),
                stale_skips: ts.iter().map(|t| t.stale_skips).sum(),
                reestablished: ts.iter().filter(|t| t.reestablished).count() as u32,
            }
        })
        .collect();
    Ok((CrashMatrix { reps, rows }, trials))
}

impl CrashMatrix {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(CrashRow::pass)
    }

    pub fn to_json_lines(&self) -> String {
        self.rows
            .iter()
            .map(|r| serde_json::to_string(r).expect("serializable") + "\n")
            .collect()
    }

    pub fn summary_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<32} {:>5} {:>6} {:>7} {:>11} {:>9} {:>9} {:>6} {:>8}",
            "kill point", "fired", "rewind", "half", "dup_uplink", "mismatch", "stale", "rejoin", "result"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<32} {:>5} {:>6} {:>7} {:>11} {:>9} {:>9} {:>6} {:>8}",
                r.point,
                format!("{}/{}", r.fired, r.reps),
                r.counter_rewinds,
                r.half_sealed,
                r.duplicate_uplinks,
                r.aggregate_mismatches,
                r.stale_skips,
                r.reestablished,
                if r.pass() { "PASS" } else { "FAIL" },
            );
        }
        s
    }
}

// ---- freshness -------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct FreshnessReport {
    pub trusted_trials: u32,
    /// Forced repeats refused with a stale-round error.
    pub trusted_rejected: u32,
    /// Host attempts to rewind the trusted counter that were refused.
    pub trusted_rewind_refused: u32,
    pub software_trials: u32,
    /// Trials where two transmissions for one round differ by exactly the
    /// difference of the two quantized gradients.
    pub software_extracted: u32,
    /// Trials where the replayed transmission matched the original uplink.
    pub software_replay_matches: u32,
}

fn freshness_config(base: &CohortConfig, mode: Mode) -> CohortConfig {
    let mut f = base.to_file_config();
    f.n = 4;
    f.t = 2;
    f.quorum = None;
    f.rounds = 3;
    f.epoch_len = 3;
    f.dim = f.dim.min(64);
    f.mode = mode;
    f.dropouts = 0;
    CohortConfig::from_file_config(f).expect("freshness parameters are valid")
}

fn masked_vector(frame: &crate::protocol::Frame) -> Option<FieldVector> {
    if frame.kind != MessageKind::MaskedGradient {
        return None;
    }
    match Message::from_frame(frame).ok()? {
        Message::MaskedGradient { vector, .. } => Some(vector),
        _ => None,
    }
}

/// Forces a client to mask an already-used round index again.
///
/// With the trusted backend the enclave refuses. With the software backend
/// the host rewinds the counter, the same mask is reused, and the difference
/// of the two transmissions is the difference of the two gradients.
pub fn freshness_demo(base: &CohortConfig, trials: u32) -> std::io::Result<FreshnessReport> {
    let mut rep = FreshnessReport {
        trusted_trials: trials,
        trusted_rejected: 0,
        trusted_rewind_refused: 0,
        software_trials: trials,
        software_extracted: 0,
        software_replay_matches: 0,
    };

    let cfg = freshness_config(base, Mode::Chronos);
    let mut sim = Simulation::new(&cfg, RunOptions::default())?;
    sim.run_to_end();
    let ids = cfg.client_ids();
    for i in 0..trials {
        let id = ids[i as usize % ids.len()];
        let round = 1 + i % cfg.rounds;
        let g = workload::contribution(&cfg, id, cfg.rounds + 1 + i);
        let c = sim.client_mut(id).expect("cohort member");
        let sent = c.run_active_round(round, &g);
        let refused = matches!(
            c.events().last(),
            Some(ClientEvent::Skipped {
                reason: SkipReason::StaleRound { .. },
                ..
            })
        );
        if sent.is_none() && refused {
            rep.trusted_rejected += 1;
        }
        if let Some(e) = c.enclave_mut() {
            if matches!(e.rewind_counter(round - 1), Err(EnclaveError::Unsupported)) {
                rep.trusted_rewind_refused += 1;
            }
        }
    }

    let cfg = freshness_config(base, Mode::ChronosSw);
    let mut sim = Simulation::new(
        &cfg,
        RunOptions {
            capture_uplink: true,
            ..RunOptions::default()
        },
    )?;
    sim.run_to_end();
    let original: BTreeMap<DeviceId, Vec<u8>> = sim
        .captured()
        .uplink
        .iter()
        .filter(|(_, r, _)| *r == cfg.rounds)
        .map(|(id, _, p)| (*id, p.clone()))
        .collect();
    let r = cfg.rounds;
    for i in 0..trials {
        let id = ids[i as usize % ids.len()];
        let g_r = workload::contribution(&cfg, id, r);
        let g_other = workload::contribution(&cfg, id, r + 1 + i);
        let c = sim.client_mut(id).expect("cohort member");
        let mut transmit = |g: &[f64]| {
            let e = c.enclave_mut()?;
            e.rewind_counter(r - 1).ok()?;
            c.run_active_round(r, g)
        };
        let (Some(first), Some(second)) = (transmit(&g_r), transmit(&g_other)) else {
            continue;
        };
        if original.get(&id) == Some(&first.payload) {
            rep.software_replay_matches += 1;
        }
        let (Some(a), Some(b)) = (masked_vector(&first), masked_vector(&second)) else {
            continue;
        };
        let observed = sub_vec(&a, &b).expect("same dimension");
        let oracle = sub_vec(&quantize(&g_r, &cfg.quant), &quantize(&g_other, &cfg.quant)).expect("same dimension");
        if observed == oracle && !oracle.is_zero() {
            rep.software_extracted += 1;
        }
    }
    Ok(rep)
}

// ---- storage ---------------------------------------------------------------

/// Establishes a cohort of `n` enclaves directly (no network) and returns
/// every device's persistent secure-storage size.
pub fn sealed_footprints(n: usize, t: usize, backend: Backend, seed: u64) -> Result<Vec<u64>, EnclaveError> {
    let tmp = tempfile::Builder::new()
        .prefix("chronos-footprint-")
        .tempdir()
        .map_err(EnclaveError::Io)?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let ca = RootCa::generate(&mut rng);
    let mut enclaves = (1..=n as u64)
        .map(|i| Enclave::provision(tmp.path().join(i.to_string()), DeviceId(i), &ca, backend, &mut rng))
        .collect::<Result<Vec<_>, _>>()?;
    let announces: Vec<(DeviceId, SignedAnnounce)> = enclaves
        .iter_mut()
        .map(|e| Ok((e.device(), e.cmd_keygen()?)))
        .collect::<Result<_, EnclaveError>>()?;
    for e in enclaves.iter_mut() {
        e.cmd_compute_seeds(&announces)?;
        e.cmd_seal(t)?;
    }
    enclaves
        .iter()
        .map(|e| e.persistent_footprint().map_err(EnclaveError::Io))
        .collect()
}
