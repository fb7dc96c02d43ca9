//! Pairwise additive masks.
//!
//! For client `i` and round `r`:
//! `m_i(r) = sum_{j > i} PRG(k_ij, r) - sum_{j < i} PRG(k_ji, r)  (mod p)`.
//! Every pair contributes one `+` and one `-` copy of the same stream, so the
//! masks of a full cohort sum to zero.

use crate::crypto::prg::PrgStream;
use crate::field::{FieldElem, FieldVector};
use crate::id::DeviceId;

/// Computes the mask of `self_id` from its per-peer PRG keys.
pub fn pairwise_mask<'a, I>(self_id: DeviceId, peers: I, round: u32, dim: usize) -> FieldVector
where
    I: IntoIterator<Item = (DeviceId, &'a [u8; 32])>,
{
    let mut acc = vec![FieldElem::ZERO; dim];
    for (peer, k_prg) in peers {
        let mut stream = PrgStream::new(k_prg, round);
        if peer > self_id {
            stream.for_each_elem(dim, |i, e| acc[i] += e);
        } else if peer < self_id {
            stream.for_each_elem(dim, |i, e| acc[i] -= e);
        }
    }
    FieldVector::from_elems(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_keys, dh, keygen};
    use rand::rngs::OsRng;

    #[test]
    fn full_cohort_masks_cancel() {
        let n = 6;
        let keys: Vec<_> = (0..n).map(|_| keygen(&mut OsRng)).collect();
        let ids: Vec<DeviceId> = (0..n as u64).map(|i| DeviceId(100 + i * 3)).collect();
        let mut total = FieldVector::zeros(33);
        for i in 0..n {
            let prg_keys: Vec<(DeviceId, [u8; 32])> = (0..n)
                .filter(|&j| j != i)
                .map(|j| {
                    (
                        ids[j],
                        derive_keys(&dh(keys[i].secret(), &keys[j].public()).unwrap()).k_prg,
                    )
                })
                .collect();
            let m = pairwise_mask(ids[i], prg_keys.iter().map(|(id, k)| (*id, k)), 9, 33);
            assert!(!m.is_zero());
            total.add_assign_vec(&m).unwrap();
        }
        assert!(total.is_zero());
    }

    #[test]
    fn no_peers_gives_zero_mask() {
        assert!(pairwise_mask(DeviceId(1), std::iter::empty(), 1, 10).is_zero());
    }

    #[test]
    fn sign_follows_id_order() {
        let k = [4u8; 32];
        let up = pairwise_mask(DeviceId(1), [(DeviceId(2), &k)], 3, 8);
        let down = pairwise_mask(DeviceId(2), [(DeviceId(1), &k)], 3, 8);
        assert_eq!(up, crate::crypto::prg_field_stream(&k, 3, 8));
        assert!(crate::field::add_vec(&up, &down).unwrap().is_zero());
    }
}
