use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes128Gcm, Nonce};
use rand::{CryptoRng, RngCore};

use super::shamir::ShamirShare;
use super::CryptoError;

pub const NONCE_LEN: usize = 12;
pub const TAG_LEN: usize = 16;

/// A Shamir share wrapped for one peer: `nonce[12] || ct[32] || tag[16]`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct EncryptedShare {
    pub nonce: [u8; NONCE_LEN],
    pub ct: [u8; 32],
    pub tag: [u8; TAG_LEN],
}

impl EncryptedShare {
    pub const WIRE_LEN: usize = NONCE_LEN + 32 + TAG_LEN;

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[..12].copy_from_slice(&self.nonce);
        out[12..44].copy_from_slice(&self.ct);
        out[44..].copy_from_slice(&self.tag);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() != Self::WIRE_LEN {
            return Err(CryptoError::Encoding(format!(
                "encrypted share must be {} bytes, got {}",
                Self::WIRE_LEN,
                b.len()
            )));
        }
        Ok(EncryptedShare {
            nonce: b[..12].try_into().unwrap(),
            ct: b[12..44].try_into().unwrap(),
            tag: b[44..].try_into().unwrap(),
        })
    }
}

/// AES-128-GCM over the share's `y` bytes with the evaluation index `x`
/// as one byte of associated data. Fresh random nonce per call.
pub fn wrap_share<R: RngCore + CryptoRng>(share: &ShamirShare, k_enc: &[u8; 16], rng: &mut R) -> EncryptedShare {
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes128Gcm::new(k_enc.into());
    let out = cipher
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &share.y,
                aad: &[share.x],
            },
        )
        .expect("AES-GCM encryption of 32 bytes cannot fail");
    EncryptedShare {
        nonce,
        ct: out[..32].try_into().unwrap(),
        tag: out[32..].try_into().unwrap(),
    }
}

/// Inverse of [`wrap_share`]; `x` must be the index the share was wrapped with.
pub fn unwrap_share(es: &EncryptedShare, x: u8, k_enc: &[u8; 16]) -> Result<ShamirShare, CryptoError> {
    let cipher = Aes128Gcm::new(k_enc.into());
    let mut buf = Vec::with_capacity(48);
    buf.extend_from_slice(&es.ct);
    buf.extend_from_slice(&es.tag);
    let pt = cipher
        .decrypt(Nonce::from_slice(&es.nonce), Payload { msg: &buf, aad: &[x] })
        .map_err(|_| CryptoError::Authentication)?;
    Ok(ShamirShare {
        x,
        y: pt.try_into().map_err(|_| CryptoError::Authentication)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;
    use std::collections::HashSet;

    fn share() -> ShamirShare {
        let mut y = [0u8; 32];
        OsRng.fill_bytes(&mut y);
        ShamirShare { x: 7, y }
    }

    #[test]
    fn round_trip() {
        let k = [9u8; 16];
        let s = share();
        let es = wrap_share(&s, &k, &mut OsRng);
        assert_eq!(es.to_bytes().len(), 60);
        assert_eq!(unwrap_share(&es, 7, &k).unwrap(), s);
        assert_eq!(EncryptedShare::from_bytes(&es.to_bytes()).unwrap(), es);
    }

    #[test]
    fn any_bit_flip_fails_authentication() {
        let k = [1u8; 16];
        let s = share();
        let es = wrap_share(&s, &k, &mut OsRng);
        let bytes = es.to_bytes();
        for bit in 0..bytes.len() * 8 {
            let mut b = bytes;
            b[bit / 8] ^= 1 << (bit % 8);
            let tampered = EncryptedShare::from_bytes(&b).unwrap();
            assert_eq!(unwrap_share(&tampered, 7, &k), Err(CryptoError::Authentication));
        }
    }

    #[test]
    fn wrong_index_or_key_fails() {
        let k = [1u8; 16];
        let es = wrap_share(&share(), &k, &mut OsRng);
        assert_eq!(unwrap_share(&es, 8, &k), Err(CryptoError::Authentication));
        assert_eq!(unwrap_share(&es, 7, &[2u8; 16]), Err(CryptoError::Authentication));
    }

    #[test]
    fn nonces_do_not_repeat() {
        let k = [3u8; 16];
        let s = share();
        let mut seen = HashSet::new();
        for _ in 0..100_000 {
            assert!(seen.insert(wrap_share(&s, &k, &mut OsRng).nonce));
        }
    }

    #[test]
    fn rejects_wrong_length() {
        assert!(EncryptedShare::from_bytes(&[0u8; 59]).is_err());
    }
}
