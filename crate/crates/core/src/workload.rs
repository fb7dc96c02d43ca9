//! Deterministic synthetic training data.
//!
//! Each client's gradient for a round is a pseudo-random real vector in
//! `[-g_max, g_max]`, a pure function of `(seed, client, round)`. Clients
//! pre-weight it by `|D_i| / max_samples` before quantizing, so the field sum
//! over participants is the numerator of the FedAvg average.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::CohortConfig;
use crate::field::{quantize, FieldVector};
use crate::id::DeviceId;

fn stream(seed: u64, client: DeviceId, round: u32, domain: u8) -> ChaCha12Rng {
    let mut s = [0u8; 32];
    s[..8].copy_from_slice(&seed.to_be_bytes());
    s[8..16].copy_from_slice(&client.to_bytes());
    s[16..20].copy_from_slice(&round.to_be_bytes());
    s[20] = domain;
    ChaCha12Rng::from_seed(s)
}

pub fn synthetic_gradient(seed: u64, client: DeviceId, round: u32, dim: usize, g_max: f64) -> Vec<f64> {
    let mut rng = stream(seed, client, round, 1);
    (0..dim).map(|_| rng.gen_range(-g_max..=g_max)).collect()
}

/// `|D_i|`, uniform in `[max_samples / 10, max_samples]`.
pub fn sample_count(seed: u64, client: DeviceId, max_samples: u32) -> u32 {
    let mut rng = stream(seed, client, 0, 2);
    rng.gen_range((max_samples / 10).max(1)..=max_samples)
}

/// The vector a client actually contributes: its gradient scaled by
/// `|D_i| / max_samples`.
pub fn contribution(cfg: &CohortConfig, client: DeviceId, round: u32) -> Vec<f64> {
    let w = sample_count(cfg.seed, client, cfg.max_samples) as f64 / cfg.max_samples as f64;
    synthetic_gradient(cfg.seed, client, round, cfg.dim, cfg.quant.g_max())
        .into_iter()
        .map(|g| g * w)
        .collect()
}

pub fn quantized_contribution(cfg: &CohortConfig, client: DeviceId, round: u32) -> FieldVector {
    quantize(&contribution(cfg, client, round), &cfg.quant)
}

/// Plaintext oracle: field sum of the quantized contributions of `clients`.
pub fn oracle_sum(cfg: &CohortConfig, clients: &[DeviceId], round: u32) -> FieldVector {
    let mut acc = FieldVector::zeros(cfg.dim);
    for c in clients {
        acc.add_assign_vec(&quantized_contribution(cfg, *c, round))
            .expect("same dimension");
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_bounded() {
        let a = synthetic_gradient(3, DeviceId(1), 2, 500, 1024.0);
        assert_eq!(a, synthetic_gradient(3, DeviceId(1), 2, 500, 1024.0));
        assert_ne!(a, synthetic_gradient(3, DeviceId(1), 3, 500, 1024.0));
        assert_ne!(a, synthetic_gradient(3, DeviceId(2), 2, 500, 1024.0));
        assert!(a.iter().all(|g| g.abs() <= 1024.0));
        let n = sample_count(3, DeviceId(1), 500);
        assert!((50..=500).contains(&n));
    }
}
