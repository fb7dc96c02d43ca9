use aes::cipher::{generic_array::GenericArray, BlockEncrypt, KeyInit};
use aes::Aes128;

use crate::field::{FieldElem, FieldVector, P};

const BATCH_BLOCKS: usize = 256;
const BATCH_CHUNKS: usize = BATCH_BLOCKS * 4;

/// AES-128-CTR keystream read as big-endian 32-bit chunks, keeping only
/// chunks below `p`.
///
/// The counter block is the round index zero-extended to 96 bits (big-endian)
/// followed by a 32-bit big-endian block counter starting at 0.
pub struct PrgStream {
    cipher: Aes128,
    iv_prefix: [u8; 12],
    next_block: u32,
    blocks: Vec<GenericArray<u8, aes::cipher::consts::U16>>,
    chunks: Vec<u32>,
    pos: usize,
    consumed: u64,
}

impl PrgStream {
    /// Keys AES-128 with the first 16 bytes of `k_prg`.
    pub fn new(k_prg: &[u8; 32], round: u32) -> Self {
        let key: [u8; 16] = k_prg[..16].try_into().unwrap();
        let mut iv_prefix = [0u8; 12];
        iv_prefix[8..].copy_from_slice(&round.to_be_bytes());
        PrgStream {
            cipher: Aes128::new(&key.into()),
            iv_prefix,
            next_block: 0,
            blocks: Vec::new(),
            chunks: Vec::new(),
            pos: 0,
            consumed: 0,
        }
    }

    /// Number of 4-byte chunks read so far, accepted or not.
    pub fn chunks_consumed(&self) -> u64 {
        self.consumed
    }

    fn refill(&mut self) {
        self.blocks.resize(BATCH_BLOCKS, GenericArray::default());
        let mut ctr = self.next_block;
        for b in self.blocks.iter_mut() {
            b[..12].copy_from_slice(&self.iv_prefix);
            b[12..].copy_from_slice(&ctr.to_be_bytes());
            ctr = ctr.wrapping_add(1);
        }
        self.next_block = ctr;
        self.cipher.encrypt_blocks(&mut self.blocks);
        self.chunks.resize(BATCH_CHUNKS, 0);
        let bytes = self.blocks.iter().flat_map(|b| b.chunks_exact(4));
        for (out, c) in self.chunks.iter_mut().zip(bytes) {
            *out = u32::from_be_bytes([c[0], c[1], c[2], c[3]]);
        }
        self.pos = 0;
    }

    #[inline]
    pub fn next_elem(&mut self) -> FieldElem {
        loop {
            if self.pos == self.chunks.len() {
                self.refill();
            }
            let c = self.chunks[self.pos];
            self.pos += 1;
            self.consumed += 1;
            if let Some(e) = accept_chunk(c) {
                return e;
            }
        }
    }

    /// Applies `f` to each of the next `count` elements, in order.
    pub fn for_each_elem(&mut self, count: usize, mut f: impl FnMut(usize, FieldElem)) {
        // Accepted chunks are compacted without branching on the (random)
        // rejection outcome, then handed out in order.
        let mut accepted = [0u32; BATCH_CHUNKS + 1];
        let mut i = 0;
        while i < count {
            if self.pos == self.chunks.len() {
                self.refill();
            }
            let mut kept = 0;
            for &c in &self.chunks[self.pos..] {
                accepted[kept] = c;
                kept += (c < P) as usize;
            }
            let take = kept.min(count - i);
            if take < kept {
                // Stop right after the last element handed out.
                let mut seen = 0;
                let mut pos = self.pos;
                while seen < take {
                    seen += (self.chunks[pos] < P) as usize;
                    pos += 1;
                }
                self.consumed += (pos - self.pos) as u64;
                self.pos = pos;
            } else {
                self.consumed += (self.chunks.len() - self.pos) as u64;
                self.pos = self.chunks.len();
            }
            for &c in &accepted[..take] {
                f(i, FieldElem::new(c).expect("compacted chunks are below p"));
                i += 1;
            }
        }
    }

    pub fn take_vector(&mut self, count: usize) -> FieldVector {
        let mut out = Vec::with_capacity(count);
        self.for_each_elem(count, |_, e| out.push(e));
        FieldVector::from_elems(out)
    }
}

impl Iterator for PrgStream {
    type Item = FieldElem;

    fn next(&mut self) -> Option<FieldElem> {
        Some(self.next_elem())
    }
}

/// Rejection rule: a chunk is used as-is iff it is below `p`.
#[inline]
pub fn accept_chunk(chunk: u32) -> Option<FieldElem> {
    FieldElem::new(chunk)
}

/// `count` pseudorandom field elements for `(k_prg, round)`.
pub fn prg_field_stream(k_prg: &[u8; 32], round: u32, count: usize) -> FieldVector {
    PrgStream::new(k_prg, round).take_vector(count)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key() -> [u8; 32] {
        std::array::from_fn(|i| i as u8)
    }

    // Frozen from an independent AES-CTR implementation (Python `cryptography`).
    #[test]
    fn matches_reference_keystream() {
        let mut s = PrgStream::new(&key(), 7);
        let got: Vec<u32> = (0..12).map(|_| s.next_elem().value()).collect();
        assert_eq!(
            got,
            vec![
                550935651, 1345672184, 541735291, 1265181979, 1234381298, 1693760973, 1695160763, 1300382418,
                1846481718, 1959638541, 572039515, 1500335020
            ]
        );
        assert_eq!(s.chunks_consumed(), 18);

        let mut s = PrgStream::new(&key(), 0);
        let got: Vec<u32> = (0..8).map(|_| s.next_elem().value()).collect();
        assert_eq!(
            got,
            vec![1867481442, 1933972373, 1232846307, 1710501130, 1238796115, 1619112093, 879411768, 1348286046]
        );
        assert_eq!(s.chunks_consumed(), 15);
    }

    #[test]
    fn rejection_rule() {
        assert_eq!(accept_chunk(0xFFFF_FFFF), None);
        assert_eq!(accept_chunk(crate::field::P), None);
        assert_eq!(accept_chunk(0x8000_0000), None);
        assert_eq!(accept_chunk(crate::field::P - 1).unwrap().value(), crate::field::P - 1);
        assert_eq!(accept_chunk(0).unwrap().value(), 0);
    }

    #[test]
    fn deterministic() {
        assert_eq!(prg_field_stream(&key(), 3, 1000), prg_field_stream(&key(), 3, 1000));
    }

    #[test]
    fn prefix_stable_across_lengths() {
        let long = prg_field_stream(&key(), 3, 1000);
        let short = prg_field_stream(&key(), 3, 10);
        assert_eq!(&long.as_slice()[..10], short.as_slice());
    }

    #[test]
    fn rounds_give_unrelated_streams() {
        let a = prg_field_stream(&key(), 1, 1000);
        let b = prg_field_stream(&key(), 2, 1000);
        let same = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
        assert!(same <= 10);
    }

    #[test]
    fn key_tail_does_not_affect_stream() {
        let mut k2 = key();
        k2[31] ^= 0xff;
        assert_eq!(prg_field_stream(&key(), 9, 64), prg_field_stream(&k2, 9, 64));
    }

    #[test]
    fn batched_reads_match_single_reads() {
        let mut a = PrgStream::new(&key(), 5);
        let mut b = PrgStream::new(&key(), 5);
        for take in [1usize, 7, 1000, 3000, 2, 4096] {
            let bulk = a.take_vector(take);
            let single: Vec<FieldElem> = (0..take).map(|_| b.next_elem()).collect();
            assert_eq!(bulk.as_slice(), &single[..]);
            assert_eq!(a.chunks_consumed(), b.chunks_consumed());
        }
    }

    #[test]
    fn empty_request() {
        assert!(prg_field_stream(&key(), 0, 0).is_empty());
    }
}
