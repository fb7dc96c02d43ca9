use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::Sha256;
use x25519_dalek::{PublicKey, StaticSecret};

use super::CryptoError;

pub const INFO_ENC: &[u8] = b"CHRONOS-v1-enc";
pub const INFO_PRG: &[u8] = b"CHRONOS-v1-prg";

/// X25519 key pair. The secret scalar is kept as raw bytes so it can be
/// split into Shamir shares; clamping happens inside the scalar multiply.
#[derive(Clone)]
pub struct KeyPair {
    sk: [u8; 32],
    pk: [u8; 32],
}

impl KeyPair {
    pub fn from_secret(sk: [u8; 32]) -> Self {
        let pk = public_key(&sk);
        KeyPair { sk, pk }
    }

    pub fn secret(&self) -> &[u8; 32] {
        &self.sk
    }

    pub fn public(&self) -> [u8; 32] {
        self.pk
    }
}

impl std::fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyPair")
            .field("pk", &hex::encode(self.pk))
            .finish_non_exhaustive()
    }
}

impl Drop for KeyPair {
    fn drop(&mut self) {
        self.sk.fill(0);
    }
}

pub fn public_key(sk: &[u8; 32]) -> [u8; 32] {
    PublicKey::from(&StaticSecret::from(*sk)).to_bytes()
}

pub fn keygen<R: RngCore + CryptoRng>(rng: &mut R) -> KeyPair {
    let mut sk = [0u8; 32];
    rng.fill_bytes(&mut sk);
    KeyPair::from_secret(sk)
}

/// Raw 32-byte Diffie-Hellman output.
#[derive(Clone, PartialEq, Eq)]
pub struct SharedSecret(pub [u8; 32]);

impl std::fmt::Debug for SharedSecret {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("SharedSecret(..)")
    }
}

impl Drop for SharedSecret {
    fn drop(&mut self) {
        self.0.fill(0);
    }
}

pub fn dh(sk: &[u8; 32], pk: &[u8; 32]) -> Result<SharedSecret, CryptoError> {
    let shared = StaticSecret::from(*sk).diffie_hellman(&PublicKey::from(*pk));
    if !shared.was_contributory() {
        return Err(CryptoError::KeyAgreement);
    }
    Ok(SharedSecret(shared.to_bytes()))
}

/// Per-pair keys: a 128-bit share-encryption key and 256 bits of PRG key
/// material, of which the first 16 bytes key AES-128.
#[derive(Clone, PartialEq, Eq)]
pub struct DerivedKeys {
    pub k_enc: [u8; 16],
    pub k_prg: [u8; 32],
}

impl std::fmt::Debug for DerivedKeys {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("DerivedKeys(..)")
    }
}

/// HKDF-SHA256 with an empty salt; the two keys differ only by info string.
pub fn derive_keys(s: &SharedSecret) -> DerivedKeys {
    let hk = Hkdf::<Sha256>::new(None, &s.0);
    let mut k_enc = [0u8; 16];
    let mut k_prg = [0u8; 32];
    hk.expand(INFO_ENC, &mut k_enc)
        .expect("16 bytes is a valid HKDF length");
    hk.expand(INFO_PRG, &mut k_prg)
        .expect("32 bytes is a valid HKDF length");
    DerivedKeys { k_enc, k_prg }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    fn unhex32(s: &str) -> [u8; 32] {
        hex::decode(s).unwrap().try_into().unwrap()
    }

    #[test]
    fn keygen_is_fresh_and_consistent() {
        let a = keygen(&mut OsRng);
        let b = keygen(&mut OsRng);
        assert_ne!(a.public(), b.public());
        assert_eq!(public_key(a.secret()), a.public());
    }

    // RFC 7748, section 6.1.
    #[test]
    fn rfc7748_vectors() {
        let a_sk = unhex32("77076d0a7318a57d3c16c17251b26645df4c2f87ebc0992ab177fba51db92c2a");
        let a_pk = unhex32("8520f0098930a754748b7ddcb43ef75a0dbf3a0d26381af4eba4a98eaa9b4e6a");
        let b_sk = unhex32("5dab087e624a8a4b79e17f8b83800ee66f3bb1292618b6fd1c2f8b27ff88e0eb");
        let b_pk = unhex32("de9edb7d7b7dc1b4d35b61c2ece435373f8343c85b78674dadfc7e146f882b4f");
        let k = unhex32("4a5d9d5ba4ce2de1728e3bf480350f25e07e21c947d19e3376f09b3c1e161742");
        assert_eq!(public_key(&a_sk), a_pk);
        assert_eq!(public_key(&b_sk), b_pk);
        assert_eq!(dh(&a_sk, &b_pk).unwrap().0, k);
        assert_eq!(dh(&b_sk, &a_pk).unwrap().0, k);
    }

    #[test]
    fn dh_is_symmetric() {
        for _ in 0..16 {
            let a = keygen(&mut OsRng);
            let b = keygen(&mut OsRng);
            assert_eq!(
                dh(a.secret(), &b.public()).unwrap(),
                dh(b.secret(), &a.public()).unwrap()
            );
        }
    }

    #[test]
    fn low_order_point_rejected() {
        let a = keygen(&mut OsRng);
        assert_eq!(dh(a.secret(), &[0u8; 32]), Err(CryptoError::KeyAgreement));
        let mut one = [0u8; 32];
        one[0] = 1;
        assert_eq!(dh(a.secret(), &one), Err(CryptoError::KeyAgreement));
    }

    // Golden values from an independent HKDF implementation (Python `cryptography`).
    #[test]
    fn hkdf_golden_zero_secret() {
        let keys = derive_keys(&SharedSecret([0u8; 32]));
        assert_eq!(hex::encode(keys.k_enc), "12e45a5124ea2ca206df4d7cc67887c2");
        assert_eq!(
            hex::encode(keys.k_prg),
            "6e6d760acbad337454b97eeb398b33459aed7079a74dd031ef55a9d30f22e413"
        );
    }

    #[test]
    fn derived_keys_agree_and_are_separated() {
        for _ in 0..16 {
            let a = keygen(&mut OsRng);
            let b = keygen(&mut OsRng);
            let ka = derive_keys(&dh(a.secret(), &b.public()).unwrap());
            let kb = derive_keys(&dh(b.secret(), &a.public()).unwrap());
            assert_eq!(ka, kb);
            assert_ne!(ka.k_enc[..], ka.k_prg[..16]);
        }
    }
}
