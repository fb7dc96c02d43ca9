//! Device certificates and signed public-key announcements.
//!
//! A one-level PKI: the root CA signs `device_id || device verifying key`,
//! and the device signs each ephemeral X25519 key as `pk || device_id`.

use ed25519_dalek::{Signature, Signer, SigningKey, Verifier, VerifyingKey};
use rand::{CryptoRng, RngCore};

use super::CryptoError;
use crate::id::DeviceId;

const CERT_CONTEXT: &[u8] = b"CHRONOS-cert";

#[derive(Clone)]
pub struct RootCa {
    key: SigningKey,
}

impl RootCa {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        RootCa {
            key: SigningKey::generate(rng),
        }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        RootCa {
            key: SigningKey::from_bytes(&seed),
        }
    }

    pub fn public(&self) -> [u8; 32] {
        self.key.verifying_key().to_bytes()
    }

    pub fn issue(&self, device: DeviceId, device_key: [u8; 32]) -> DeviceCert {
        let sig = self.key.sign(&cert_message(device, &device_key));
        DeviceCert {
            device,
            device_key,
            ca_signature: sig.to_bytes(),
        }
    }
}

fn cert_message(device: DeviceId, key: &[u8; 32]) -> Vec<u8> {
    let mut m = Vec::with_capacity(CERT_CONTEXT.len() + 40);
    m.extend_from_slice(CERT_CONTEXT);
    m.extend_from_slice(&device.to_bytes());
    m.extend_from_slice(key);
    m
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DeviceCert {
    pub device: DeviceId,
    pub device_key: [u8; 32],
    pub ca_signature: [u8; 64],
}

impl DeviceCert {
    pub const WIRE_LEN: usize = 8 + 32 + 64;

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[..8].copy_from_slice(&self.device.to_bytes());
        out[8..40].copy_from_slice(&self.device_key);
        out[40..].copy_from_slice(&self.ca_signature);
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() != Self::WIRE_LEN {
            return Err(CryptoError::Encoding(format!(
                "certificate must be {} bytes",
                Self::WIRE_LEN
            )));
        }
        Ok(DeviceCert {
            device: DeviceId::from_bytes(b[..8].try_into().unwrap()),
            device_key: b[8..40].try_into().unwrap(),
            ca_signature: b[40..].try_into().unwrap(),
        })
    }

    pub fn chains_to(&self, root_ca: &[u8; 32]) -> bool {
        let Ok(ca) = VerifyingKey::from_bytes(root_ca) else {
            return false;
        };
        ca.verify_strict(
            &cert_message(self.device, &self.device_key),
            &Signature::from_bytes(&self.ca_signature),
        )
        .is_ok()
    }
}

/// Device signing key together with its enrolled certificate.
#[derive(Clone)]
pub struct DeviceIdentity {
    key: SigningKey,
    cert: DeviceCert,
}

impl DeviceIdentity {
    pub fn new(signing_seed: [u8; 32], cert: DeviceCert) -> Result<Self, CryptoError> {
        let key = SigningKey::from_bytes(&signing_seed);
        if key.verifying_key().to_bytes() != cert.device_key {
            return Err(CryptoError::Parameter("certificate does not match signing key".into()));
        }
        Ok(DeviceIdentity { key, cert })
    }

    pub fn verifying_key_for_seed(seed: &[u8; 32]) -> [u8; 32] {
        SigningKey::from_bytes(seed).verifying_key().to_bytes()
    }

    pub fn device(&self) -> DeviceId {
        self.cert.device
    }

    pub fn cert(&self) -> &DeviceCert {
        &self.cert
    }
}

/// An ephemeral X25519 public key, its signature and the signer's certificate.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct SignedAnnounce {
    pub pk: [u8; 32],
    pub signature: [u8; 64],
    pub cert: DeviceCert,
}

impl SignedAnnounce {
    pub const WIRE_LEN: usize = 32 + 64 + DeviceCert::WIRE_LEN;

    pub fn to_bytes(&self) -> [u8; Self::WIRE_LEN] {
        let mut out = [0u8; Self::WIRE_LEN];
        out[..32].copy_from_slice(&self.pk);
        out[32..96].copy_from_slice(&self.signature);
        out[96..].copy_from_slice(&self.cert.to_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, CryptoError> {
        if b.len() != Self::WIRE_LEN {
            return Err(CryptoError::Encoding(format!(
                "announce must be {} bytes",
                Self::WIRE_LEN
            )));
        }
        Ok(SignedAnnounce {
            pk: b[..32].try_into().unwrap(),
            signature: b[32..96].try_into().unwrap(),
            cert: DeviceCert::from_bytes(&b[96..])?,
        })
    }
}

fn announce_message(pk: &[u8; 32], device: DeviceId) -> [u8; 40] {
    let mut m = [0u8; 40];
    m[..32].copy_from_slice(pk);
    m[32..].copy_from_slice(&device.to_bytes());
    m
}

pub fn sign_pk(pk: &[u8; 32], identity: &DeviceIdentity) -> SignedAnnounce {
    let sig = identity.key.sign(&announce_message(pk, identity.device()));
    SignedAnnounce {
        pk: *pk,
        signature: sig.to_bytes(),
        cert: identity.cert,
    }
}

/// Checks that `announce` was produced by `device` and that its certificate
/// chains to `root_ca`.
pub fn verify_pk(announce: &SignedAnnounce, device: DeviceId, root_ca: &[u8; 32]) -> bool {
    if announce.cert.device != device || !announce.cert.chains_to(root_ca) {
        return false;
    }
    let Ok(vk) = VerifyingKey::from_bytes(&announce.cert.device_key) else {
        return false;
    };
    vk.verify(
        &announce_message(&announce.pk, device),
        &Signature::from_bytes(&announce.signature),
    )
    .is_ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;

    fn enrolled(ca: &RootCa, id: u64) -> DeviceIdentity {
        let mut seed = [0u8; 32];
        OsRng.fill_bytes(&mut seed);
        let cert = ca.issue(DeviceId(id), DeviceIdentity::verifying_key_for_seed(&seed));
        DeviceIdentity::new(seed, cert).unwrap()
    }

    #[test]
    fn sign_then_verify() {
        let ca = RootCa::generate(&mut OsRng);
        let dev = enrolled(&ca, 5);
        let ann = sign_pk(&[7u8; 32], &dev);
        assert!(verify_pk(&ann, DeviceId(5), &ca.public()));
        assert_eq!(SignedAnnounce::from_bytes(&ann.to_bytes()).unwrap(), ann);
        assert_eq!(ann.to_bytes().len(), 200);
    }

    #[test]
    fn other_ca_rejects() {
        let ca = RootCa::generate(&mut OsRng);
        let other = RootCa::generate(&mut OsRng);
        let ann = sign_pk(&[7u8; 32], &enrolled(&ca, 5));
        assert!(!verify_pk(&ann, DeviceId(5), &other.public()));
    }

    #[test]
    fn flipped_pk_rejects() {
        let ca = RootCa::generate(&mut OsRng);
        let mut ann = sign_pk(&[7u8; 32], &enrolled(&ca, 5));
        ann.pk[3] ^= 0x10;
        assert!(!verify_pk(&ann, DeviceId(5), &ca.public()));
    }

    #[test]
    fn identity_binding() {
        let ca = RootCa::generate(&mut OsRng);
        let ann = sign_pk(&[7u8; 32], &enrolled(&ca, 5));
        assert!(!verify_pk(&ann, DeviceId(6), &ca.public()));

        // A self-issued certificate from a device key the CA never signed.
        let rogue_ca = RootCa::generate(&mut OsRng);
        let rogue = enrolled(&rogue_ca, 5);
        assert!(!verify_pk(&sign_pk(&[7u8; 32], &rogue), DeviceId(5), &ca.public()));
    }

    #[test]
    fn mismatched_cert_rejected_at_construction() {
        let ca = RootCa::generate(&mut OsRng);
        let cert = ca.issue(DeviceId(1), [9u8; 32]);
        assert!(DeviceIdentity::new([1u8; 32], cert).is_err());
    }
}
