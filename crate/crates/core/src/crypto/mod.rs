//! Cryptographic building blocks for the protocol.
//!
//! - [`kx`]: X25519 key agreement and HKDF key derivation
//! - [`aead`]: AES-128-GCM share wrapping
//! - [`prg`]: AES-128-CTR sampler over `F_p` with rejection
//! - [`gf256`] / [`shamir`]: byte-wise threshold sharing
//! - [`identity`]: Ed25519 device certificates for authenticated key exchange

pub mod aead;
pub mod gf256;
pub mod identity;
pub mod kx;
pub mod prg;
pub mod shamir;

use thiserror::Error;

pub use aead::{unwrap_share, wrap_share, EncryptedShare};
pub use identity::{sign_pk, verify_pk, DeviceCert, DeviceIdentity, RootCa, SignedAnnounce};
pub use kx::{derive_keys, dh, keygen, DerivedKeys, KeyPair, SharedSecret};
pub use prg::{prg_field_stream, PrgStream};
pub use shamir::{shamir_reconstruct, shamir_split, shamir_split_at, ShamirShare};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CryptoError {
    #[error("key agreement produced a non-contributory (all-zero) secret")]
    KeyAgreement,
    #[error("authentication failed")]
    Authentication,
    #[error("invalid sharing parameters: {0}")]
    Parameter(String),
    #[error("need {needed} shares, got {got}")]
    InsufficientShares { needed: usize, got: usize },
    #[error("malformed encoding: {0}")]
    Encoding(String),
}
