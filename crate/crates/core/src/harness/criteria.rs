//! Acceptance checks, shared by `chronos verify` and the acceptance tests.
//!
//! Every check is deterministic: randomness comes from ChaCha streams keyed
//! by the seed passed in.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;

use super::experiments::{compare_modes, crash_matrix, default_threshold, freshness_demo, sealed_footprints};
use super::sim::{RunOptions, Simulation};
use crate::config::{CohortConfig, FileConfig, Mode};
use crate::crypto::prg::PrgStream;
use crate::crypto::{shamir_reconstruct, shamir_split, shamir_split_at, ShamirShare};
use crate::enclave::{footprint_formula, Backend};
use crate::field::{
    add_vec, decode_aggregate, quantize_with_diagnostics, FieldVector, QuantConfig, QuantDiagnostics, P,
};
use crate::protocol::{recovery_share_formula, Message, MessageKind};
use crate::server::RoundOutcome;

#[derive(Debug, Clone, Serialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    /// Informational only.
    pub wall_ms: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "{} criterion {:>2} {}: {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail
        )
    }
}

fn timed(id: u8, name: &'static str, f: impl FnOnce() -> Result<(bool, String), String>) -> CriterionResult {
    let t0 = Instant::now();
    let (pass, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionResult {
        id,
        name,
        pass,
        detail,
        wall_ms: t0.elapsed().as_secs_f64() * 1e3,
    }
}

fn cohort(n: usize, t: usize, edit: impl FnOnce(&mut FileConfig)) -> Result<CohortConfig, String> {
    let mut f = FileConfig {
        n,
        t,
        ..FileConfig::default()
    };
    edit(&mut f);
    CohortConfig::from_file_config(f).map_err(|e| e.to_string())
}

// ---- 1 ---------------------------------------------------------------------

/// Masked aggregates equal the plaintext quantized sums bit for bit.
pub fn mask_cancellation(seed: u64, rounds: u32) -> CriterionResult {
    timed(1, "mask cancellation", || {
        let mut notes = Vec::new();
        let mut pass = true;
        for n in [2usize, 5, 20] {
            for dim in [16usize, 50_000] {
                let cfg = cohort(n, default_threshold(n), |f| {
                    f.dim = dim;
                    f.rounds = rounds;
                    f.epoch_len = 10;
                    f.seed = seed;
                })?;
                let report = Simulation::new(&cfg, RunOptions::default())
                    .map_err(|e| e.to_string())?
                    .run();
                let checked = report.rounds.iter().filter(|r| r.field_mismatches.is_some()).count();
                let wrong: usize = report.rounds.iter().filter_map(|r| r.field_mismatches).sum();
                let complete = report.rounds.iter().all(|r| r.detail == RoundOutcome::Complete);
                pass &= checked == rounds as usize && wrong == 0 && complete;
                notes.push(format!("N={n} D={dim}: {checked} rounds, {wrong} differing elements"));
            }
        }
        Ok((pass, notes.join("; ")))
    })
}

// ---- 2 ---------------------------------------------------------------------

/// Permanent dropouts are recovered exactly while survivors reach the
/// threshold; recovery share traffic follows `(N-k) * k * 32`.
pub fn dropout_recovery(seed: u64) -> CriterionResult {
    timed(2, "dropout recovery", || {
        let (n, t) = (20usize, 13usize);
        let mut notes = Vec::new();
        let mut pass = true;
        for k in [1usize, 3, 5, 7, 8] {
            let cfg = cohort(n, t, |f| {
                f.rounds = 50;
                f.epoch_len = 10;
                f.dim = 256;
                f.seed = seed;
                f.dropouts = k;
                f.dropout_from = 1;
            })?;
            let report = Simulation::new(&cfg, RunOptions::default())
                .map_err(|e| e.to_string())?
                .run();
            let expected_share = recovery_share_formula(n, k);
            if n - k >= t {
                let recovered = report
                    .rounds
                    .iter()
                    .filter(|r| r.detail == RoundOutcome::Recovered { k } && r.field_mismatches == Some(0))
                    .count();
                // Keys are reconstructed once per epoch; later rounds of the
                // epoch reuse them.
                let per_epoch: Vec<u64> = (1..=cfg.epochs())
                    .map(|e| {
                        report
                            .rounds
                            .iter()
                            .filter(|r| r.epoch == e)
                            .map(|r| r.recovery_share_bytes)
                            .sum()
                    })
                    .collect();
                let ok = recovered == 50 && per_epoch.iter().all(|b| *b == expected_share as u64);
                pass &= ok;
                notes.push(format!(
                    "k={k}: {recovered}/50 RECOVERED exact, share bytes per epoch {per_epoch:?} (expected {expected_share})"
                ));
            } else {
                let failed = report
                    .rounds
                    .iter()
                    .filter(|r| matches!(r.detail, RoundOutcome::Failed { .. }))
                    .count();
                pass &= failed == 50;
                notes.push(format!("k={k}: {failed}/50 FAILED"));
            }
        }
        Ok((pass, notes.join("; ")))
    })
}

// ---- 3 ---------------------------------------------------------------------

pub fn storage_footprint(seed: u64) -> CriterionResult {
    timed(3, "storage footprint", || {
        let mut notes = Vec::new();
        let mut pass = true;
        for (n, expected) in [(20usize, 628u64), (50, 1588)] {
            let sizes =
                sealed_footprints(n, default_threshold(n), Backend::Trusted, seed).map_err(|e| e.to_string())?;
            let ok = sizes.iter().all(|s| *s == expected) && footprint_formula(n) as u64 == expected;
            pass &= ok;
            let (lo, hi) = (
                sizes.iter().min().copied().unwrap_or(0),
                sizes.iter().max().copied().unwrap_or(0),
            );
            notes.push(format!(
                "N={n}: {} devices, {lo}..={hi} bytes (expected {expected})",
                sizes.len()
            ));
        }
        Ok((pass, notes.join("; ")))
    })
}

// ---- 4 ---------------------------------------------------------------------

pub fn freshness(seed: u64, trials: u32) -> CriterionResult {
    timed(4, "freshness", || {
        let base = cohort(4, 2, |f| f.seed = seed)?;
        let r = freshness_demo(&base, trials).map_err(|e| e.to_string())?;
        let pass = r.trusted_rejected == trials && r.software_extracted == trials;
        Ok((
            pass,
            format!(
                "chronos: {}/{} repeats rejected as stale ({} counter rewinds refused); chronos-sw: {}/{} exact g(r)-g(r') extractions ({} replays identical to the original uplink)",
                r.trusted_rejected, trials, r.trusted_rewind_refused, r.software_extracted, trials, r.software_replay_matches
            ),
        ))
    })
}

// ---- 5 ---------------------------------------------------------------------

pub fn crash_safety(seed: u64, reps: u32) -> CriterionResult {
    timed(5, "crash safety", || {
        let base = cohort(4, 2, |f| f.seed = seed)?;
        let (matrix, _) = crash_matrix(&base, reps).map_err(|e| e.to_string())?;
        let rewinds: usize = matrix.rows.iter().map(|r| r.counter_rewinds).sum();
        let half: usize = matrix.rows.iter().map(|r| r.half_sealed).sum();
        let failing: Vec<&str> = matrix
            .rows
            .iter()
            .filter(|r| !r.pass())
            .map(|r| r.point.as_str())
            .collect();
        let pass = matrix.rows.len() >= 12 && rewinds == 0 && half == 0 && failing.is_empty();
        Ok((
            pass,
            format!(
                "{} kill points x {reps} reps: {rewinds} counter rewinds, {half} half-sealed, failing points {failing:?}",
                matrix.rows.len()
            ),
        ))
    })
}

// ---- 6 ---------------------------------------------------------------------

pub fn message_complexity(seed: u64) -> CriterionResult {
    timed(6, "message complexity", || {
        let ns = [4usize, 8, 12, 16, 20];
        let base = cohort(4, 2, |f| {
            f.seed = seed;
            f.rounds = 4;
            f.epoch_len = 2;
            f.dim = 32;
        })?;
        let scaling = compare_modes(&base, &ns, &[Mode::Chronos, Mode::Sync])?;

        // One recovery round: data uplink, then one request/response exchange.
        let cfg = cohort(8, 5, |f| {
            f.seed = seed;
            f.rounds = 2;
            f.epoch_len = 2;
            f.dim = 32;
            f.dropouts = 2;
            f.dropout_from = 1;
        })?;
        let report = Simulation::new(&cfg, RunOptions::default())
            .map_err(|e| e.to_string())?
            .run();
        let first = &report.rounds[0];
        let survivors = cfg.n - cfg.dropouts;
        let round_trips = if first.recovery_down.frames % survivors as u64 == 0 {
            1 + first.recovery_down.frames / survivors as u64
        } else {
            0
        };
        let recovery_ok =
            first.data_uplinks == survivors as u64 && first.active_down.frames == survivors as u64 && round_trips == 2;
        let mut detail: Vec<String> = scaling
            .verdicts
            .iter()
            .map(|v| format!("{}: {}", v.name, v.detail))
            .collect();
        detail.push(format!(
            "recovery round: {} data uplinks from {survivors} survivors, {round_trips} round trips",
            first.data_uplinks
        ));
        Ok((scaling.passed() && recovery_ok, detail.join("; ")))
    })
}

// ---- 7 ---------------------------------------------------------------------

/// Returns every `k`-subset of `0..n` in lexicographic order.
fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, k, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, k, &mut Vec::new(), &mut out);
    out
}

/// Fills every requested byte with one value; drives the coefficient choice
/// in the hiding check.
struct ConstRng(u8);

impl RngCore for ConstRng {
    fn next_u32(&mut self) -> u32 {
        u32::from_ne_bytes([self.0; 4])
    }
    fn next_u64(&mut self) -> u64 {
        u64::from_ne_bytes([self.0; 8])
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        dest.fill(self.0);
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.fill_bytes(dest);
        Ok(())
    }
}

impl rand::CryptoRng for ConstRng {}

#[derive(Debug, Default, Clone, Serialize)]
pub struct ShamirStats {
    pub exhaustive_checks: usize,
    pub sampled_checks: usize,
    pub hiding_cases: usize,
    pub failures: usize,
}

pub fn shamir_statistics(seed: u64, secrets_per_case: usize, sampled: usize) -> ShamirStats {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut st = ShamirStats::default();
    let check = |shares: &[ShamirShare], t: usize, secret: &[u8; 32], st: &mut ShamirStats| {
        if shamir_reconstruct(shares, t).ok().as_ref() != Some(secret) {
            st.failures += 1;
        }
    };
    for (t, n) in [(2usize, 3usize), (3, 5)] {
        for _ in 0..secrets_per_case {
            let mut secret = [0u8; 32];
            rng.fill_bytes(&mut secret);
            let shares = shamir_split(&secret, t, n, &mut rng).expect("valid parameters");
            for subset in subsets(n, t) {
                let picked: Vec<ShamirShare> = subset.iter().map(|&i| shares[i]).collect();
                check(&picked, t, &secret, &mut st);
                st.exhaustive_checks += 1;
            }
        }
    }
    let (t, n) = (13usize, 19usize);
    let mut secret = [0u8; 32];
    rng.fill_bytes(&mut secret);
    let shares = shamir_split(&secret, t, n, &mut rng).expect("valid parameters");
    for _ in 0..sampled {
        // `sample` returns indices in random order, so share order varies too.
        let picked: Vec<ShamirShare> = sample(&mut rng, n, t).into_iter().map(|i| shares[i]).collect();
        check(&picked, t, &secret, &mut st);
        st.sampled_checks += 1;
    }

    // Single-share hiding with t = 2: for every point x and every 1-byte
    // secret s, letting the random coefficient range over all 256 values
    // must produce every share value exactly once. Each split carries 32
    // different secrets in its 32 byte lanes.
    let xs: Vec<u8> = (1..=255).collect();
    let mut seen = vec![[0u64; 4]; 255 * 256];
    let mut collisions = 0usize;
    for block in 0..8u8 {
        let mut secret = [0u8; 32];
        for (lane, b) in secret.iter_mut().enumerate() {
            *b = block * 32 + lane as u8;
        }
        for a in 0..=255u8 {
            let shares = shamir_split_at(&secret, 2, &xs, &mut ConstRng(a)).expect("valid parameters");
            for share in &shares {
                for (lane, &y) in share.y.iter().enumerate() {
                    let s = secret[lane] as usize;
                    let slot = &mut seen[(share.x as usize - 1) * 256 + s];
                    let (w, bit) = (y as usize / 64, 1u64 << (y % 64));
                    if slot[w] & bit != 0 {
                        collisions += 1;
                    }
                    slot[w] |= bit;
                }
            }
        }
    }
    let incomplete = seen.iter().filter(|s| s.iter().any(|w| *w != u64::MAX)).count();
    st.hiding_cases = seen.len();
    st.failures += collisions + incomplete;
    st
}

pub fn shamir_properties(seed: u64) -> CriterionResult {
    timed(7, "shamir properties", || {
        let st = shamir_statistics(seed, 20, 1000);
        Ok((
            st.failures == 0 && st.sampled_checks == 1000,
            format!(
                "{} exhaustive subset reconstructions, {} sampled (13,19) subsets, {} (x, secret) hiding cases, {} failures",
                st.exhaustive_checks, st.sampled_checks, st.hiding_cases, st.failures
            ),
        ))
    })
}

// ---- 8 ---------------------------------------------------------------------

/// Upper 0.001 quantile of chi-square with 255 degrees of freedom.
pub const CHI2_255_CRIT_001: f64 = 330.519_743_634;

/// Wilson-Hilferty approximation of a chi-square quantile.
pub fn chi2_quantile_wh(dof: f64, z: f64) -> f64 {
    let a = 2.0 / (9.0 * dof);
    dof * (1.0 - a + z * a.sqrt()).powi(3)
}

#[derive(Debug, Clone, Serialize)]
pub struct PrgStats {
    pub elements: usize,
    pub chi2: f64,
    pub critical: f64,
    pub chunks_per_element: f64,
    pub expected_chunks_per_element: f64,
}

pub fn prg_statistics(seed: u64, elements: usize) -> PrgStats {
    let mut key = [0u8; 32];
    ChaCha20Rng::seed_from_u64(seed).fill_bytes(&mut key);
    let mut stream = PrgStream::new(&key, 1);
    let mut bins = [0u64; 256];
    for _ in 0..elements {
        let v = stream.next_elem().value() as u64;
        bins[(v * 256 / P as u64) as usize] += 1;
    }
    let expected = elements as f64 / 256.0;
    let chi2 = bins
        .iter()
        .map(|&o| {
            let d = o as f64 - expected;
            d * d / expected
        })
        .sum();
    PrgStats {
        elements,
        chi2,
        critical: CHI2_255_CRIT_001,
        chunks_per_element: stream.chunks_consumed() as f64 / elements as f64,
        expected_chunks_per_element: (1u64 << 32) as f64 / P as f64,
    }
}

pub fn prg_quality(seed: u64) -> CriterionResult {
    timed(8, "prg statistical quality", || {
        let s = prg_statistics(seed, 1 << 20);
        let ratio_dev = (s.chunks_per_element / s.expected_chunks_per_element - 1.0).abs();
        Ok((
            s.chi2 < s.critical && ratio_dev <= 0.02,
            format!(
                "chi2 = {:.2} (critical {:.2} at alpha 0.001, 255 dof); {:.5} chunks per element vs {:.5} expected ({:.3}% off)",
                s.chi2,
                s.critical,
                s.chunks_per_element,
                s.expected_chunks_per_element,
                ratio_dev * 100.0
            ),
        ))
    })
}

// ---- 9 ---------------------------------------------------------------------

/// Cosine between recentered masked uplinks and the signed quantized
/// gradients underneath, one value per round for client 1.
pub fn decorrelation_cosines(seed: u64, dim: usize, trials: u32) -> Result<Vec<f64>, String> {
    let cfg = cohort(5, 3, |f| {
        f.dim = dim;
        f.rounds = trials;
        f.epoch_len = trials;
        f.seed = seed;
    })?;
    let mut sim = Simulation::new(
        &cfg,
        RunOptions {
            capture_uplink: true,
            ..RunOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    sim.run_to_end();
    let plain_sink = sim.captured_plaintext();
    let client = cfg.client_ids()[0];
    let offset = cfg.quant.offset() as f64;
    let mut out = Vec::new();
    for (id, round, payload) in &sim.captured().uplink {
        if *id != client {
            continue;
        }
        let Ok(Message::MaskedGradient { vector, .. }) = Message::decode_payload(MessageKind::MaskedGradient, payload)
        else {
            return Err(format!("malformed uplink in round {round}"));
        };
        let q = plain_sink
            .iter()
            .find(|(c, r, _)| c == id && r == round)
            .map(|(_, _, q)| q)
            .ok_or_else(|| format!("no plaintext for round {round}"))?;
        let half = (P / 2) as f64;
        let m: Vec<f64> = vector
            .iter()
            .map(|e| {
                let v = e.value() as f64;
                if v > half {
                    v - P as f64
                } else {
                    v
                }
            })
            .collect();
        let g: Vec<f64> = q.iter().map(|e| e.value() as f64 - offset).collect();
        out.push(cosine(&m, &g));
    }
    Ok(out)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

pub fn decorrelation(seed: u64) -> CriterionResult {
    timed(9, "decorrelation", || {
        let cos = decorrelation_cosines(seed, 50_000, 20)?;
        let max = cos.iter().map(|c| c.abs()).fold(0.0f64, f64::max);
        let mean = cos.iter().map(|c| c.abs()).sum::<f64>() / cos.len().max(1) as f64;
        Ok((
            cos.len() == 20 && max < 0.01,
            format!(
                "{} trials at D=50000: max |cos| = {max:.5}, mean |cos| = {mean:.5}",
                cos.len()
            ),
        ))
    })
}

// ---- 10 --------------------------------------------------------------------

#[derive(Debug, Default, Clone, Serialize)]
pub struct QuantStats {
    pub sets: usize,
    pub max_error: f64,
    pub bound: f64,
    pub aliasing_errors: usize,
    pub clipped: u64,
    pub clip_mismatches: usize,
}

pub fn quantization_statistics(seed: u64, sets: usize, dim: usize) -> QuantStats {
    let n = 20u32;
    let quant =
        QuantConfig::new(QuantConfig::DEFAULT_SCALE, QuantConfig::DEFAULT_G_MAX, n).expect("default parameters");
    let g_max = quant.g_max();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut st = QuantStats {
        sets,
        bound: quant.error_bound(n),
        ..QuantStats::default()
    };
    let mut diag = QuantDiagnostics::default();
    for set in 0..sets {
        // Every other set pushes a tenth of the inputs out of range.
        let wild = set % 2 == 1;
        let mut sum = FieldVector::zeros(dim);
        let mut real = vec![0.0f64; dim];
        for _ in 0..n {
            let g: Vec<f64> = (0..dim)
                .map(|_| {
                    if wild && rng.gen_bool(0.1) {
                        rng.gen_range(1.0..50.0) * g_max * if rng.gen_bool(0.5) { 1.0 } else { -1.0 }
                    } else {
                        rng.gen_range(-g_max..=g_max)
                    }
                })
                .collect();
            sum = add_vec(&sum, &quantize_with_diagnostics(&g, &quant, &mut diag)).expect("same dimension");
            for (acc, x) in real.iter_mut().zip(&g) {
                *acc += x.clamp(-g_max, g_max);
            }
        }
        match decode_aggregate(&sum, n, &quant) {
            Ok(decoded) => {
                for (d, r) in decoded.iter().zip(&real) {
                    let err = (d - r).abs();
                    st.max_error = st.max_error.max(err);
                    if err > st.bound {
                        st.clip_mismatches += 1;
                    }
                }
            }
            Err(_) => st.aliasing_errors += 1,
        }
    }
    st.clipped = diag.clipped;
    st
}

pub fn quantization_round_trip(seed: u64) -> CriterionResult {
    timed(10, "quantization round trip", || {
        let st = quantization_statistics(seed, 100, 1000);
        Ok((
            st.aliasing_errors == 0 && st.clip_mismatches == 0 && st.max_error <= st.bound && st.clipped > 0,
            format!(
                "{} sets of 20: max error {:.3e} (bound N/2S = {:.3e}), {} clipped inputs, {} aliasing errors",
                st.sets, st.max_error, st.bound, st.clipped, st.aliasing_errors
            ),
        ))
    })
}

// ---- all -------------------------------------------------------------------

/// Runs all ten checks in order.
pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    vec![
        mask_cancellation(seed, 100),
        dropout_recovery(seed),
        storage_footprint(seed),
        freshness(seed, 100),
        crash_safety(seed, 20),
        message_complexity(seed),
        shamir_properties(seed),
        prg_quality(seed),
        decorrelation(seed),
        quantization_round_trip(seed),
    ]
}

pub fn summary(results: &[CriterionResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{}", r.line());
    }
    let passed = results.iter().filter(|r| r.pass).count();
    let _ = writeln!(s, "{passed}/{} criteria passed", results.len());
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi2_critical_value_agrees_with_approximation() {
        let wh = chi2_quantile_wh(255.0, 3.090_232_306);
        assert!((wh - CHI2_255_CRIT_001).abs() < 0.1, "{wh}");
    }

    #[test]
    fn subset_enumeration() {
        assert_eq!(subsets(5, 3).len(), 10);
        assert_eq!(subsets(3, 2), vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[2.0, 0.0]) - 1.0).abs() < 1e-12);
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
    }
}
