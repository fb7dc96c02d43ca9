//! Byte-wise t-of-n Shamir sharing of 32-byte secrets over GF(2^8).
//!
//! Each secret byte gets its own random polynomial of degree `t - 1` whose
//! constant term is that byte. A share is the evaluation of all 32
//! polynomials at one nonzero point `x`.

use rand::{CryptoRng, RngCore};

use super::gf256;
use super::CryptoError;

pub const SECRET_LEN: usize = 32;

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct ShamirShare {
    pub x: u8,
    pub y: [u8; SECRET_LEN],
}

impl std::fmt::Debug for ShamirShare {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ShamirShare(x={})", self.x)
    }
}

/// Shares evaluated at `x = 1..=n`.
pub fn shamir_split<R: RngCore + CryptoRng>(
    secret: &[u8; SECRET_LEN],
    t: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<ShamirShare>, CryptoError> {
    if n > 255 {
        return Err(CryptoError::Parameter(format!("n = {n} exceeds 255")));
    }
    let xs: Vec<u8> = (1..=n as u8).collect();
    shamir_split_at(secret, t, &xs, rng)
}

/// Shares evaluated at caller-chosen distinct nonzero points.
pub fn shamir_split_at<R: RngCore + CryptoRng>(
    secret: &[u8; SECRET_LEN],
    t: usize,
    xs: &[u8],
    rng: &mut R,
) -> Result<Vec<ShamirShare>, CryptoError> {
    let n = xs.len();
    if t == 0 || t > n {
        return Err(CryptoError::Parameter(format!(
            "need 1 <= t <= n, got t = {t}, n = {n}"
        )));
    }
    check_points(xs.iter().copied())?;

    let mut shares: Vec<ShamirShare> = xs.iter().map(|&x| ShamirShare { x, y: [0; SECRET_LEN] }).collect();
    let mut coeffs = vec![0u8; t];
    for (i, &byte) in secret.iter().enumerate() {
        coeffs[0] = byte;
        rng.fill_bytes(&mut coeffs[1..]);
        for share in shares.iter_mut() {
            share.y[i] = gf256::eval_poly(&coeffs, share.x);
        }
    }
    coeffs.fill(0);
    Ok(shares)
}

fn check_points(xs: impl Iterator<Item = u8>) -> Result<(), CryptoError> {
    let mut seen = [false; 256];
    for x in xs {
        if x == 0 {
            return Err(CryptoError::Parameter(
                "evaluation point 0 would reveal the secret".into(),
            ));
        }
        if std::mem::replace(&mut seen[x as usize], true) {
            return Err(CryptoError::Parameter(format!("duplicate evaluation point {x}")));
        }
    }
    Ok(())
}

/// Lagrange basis coefficients at 0 for the given points.
fn lagrange_at_zero(xs: &[u8]) -> Vec<u8> {
    xs.iter()
        .enumerate()
        .map(|(i, &xi)| {
            let mut num = 1u8;
            let mut den = 1u8;
            for (j, &xj) in xs.iter().enumerate() {
                if i != j {
                    // (0 - xj) / (xi - xj); subtraction is XOR.
                    num = gf256::mul(num, xj);
                    den = gf256::mul(den, gf256::add(xi, xj));
                }
            }
            gf256::div(num, den)
        })
        .collect()
}

/// Interpolates at `x = 0` using the first `t` shares.
pub fn shamir_reconstruct(shares: &[ShamirShare], t: usize) -> Result<[u8; SECRET_LEN], CryptoError> {
    if t == 0 {
        return Err(CryptoError::Parameter("threshold must be at least 1".into()));
    }
    check_points(shares.iter().map(|s| s.x))?;
    if shares.len() < t {
        return Err(CryptoError::InsufficientShares {
            needed: t,
            got: shares.len(),
        });
    }
    let used = &shares[..t];
    let xs: Vec<u8> = used.iter().map(|s| s.x).collect();
    let basis = lagrange_at_zero(&xs);
    let mut secret = [0u8; SECRET_LEN];
    for (share, &l) in used.iter().zip(&basis) {
        for (out, &y) in secret.iter_mut().zip(&share.y) {
            *out = gf256::add(*out, gf256::mul(l, y));
        }
    }
    Ok(secret)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::OsRng;
    use rand::seq::SliceRandom;

    fn random_secret() -> [u8; 32] {
        let mut s = [0u8; 32];
        OsRng.fill_bytes(&mut s);
        s
    }

    #[test]
    fn threshold_one_copies_secret() {
        let s = random_secret();
        for share in shamir_split(&s, 1, 5, &mut OsRng).unwrap() {
            assert_eq!(share.y, s);
        }
    }

    #[test]
    fn every_pair_reconstructs_for_two_of_three() {
        let mut s = [0u8; 32];
        s[0] = 0x2A;
        let shares = shamir_split(&s, 2, 3, &mut OsRng).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    let got = shamir_reconstruct(&[shares[i], shares[j]], 2).unwrap();
                    assert_eq!(got[0], 0x2A);
                    assert_eq!(got, s);
                }
            }
        }
    }

    #[test]
    fn round_trips_for_cohort_sized_threshold() {
        for _ in 0..20 {
            let s = random_secret();
            let mut shares = shamir_split(&s, 13, 19, &mut OsRng).unwrap();
            shares.shuffle(&mut OsRng);
            assert_eq!(shamir_reconstruct(&shares[..13], 13).unwrap(), s);
            assert_eq!(shamir_reconstruct(&shares, 13).unwrap(), s);
        }
    }

    #[test]
    fn order_does_not_matter() {
        let s = random_secret();
        let shares = shamir_split(&s, 3, 5, &mut OsRng).unwrap();
        let mut subset = vec![shares[4], shares[0], shares[2]];
        assert_eq!(shamir_reconstruct(&subset, 3).unwrap(), s);
        subset.reverse();
        assert_eq!(shamir_reconstruct(&subset, 3).unwrap(), s);
    }

    #[test]
    fn too_few_shares_is_an_error() {
        let s = random_secret();
        let shares = shamir_split(&s, 3, 5, &mut OsRng).unwrap();
        assert_eq!(
            shamir_reconstruct(&shares[..2], 3),
            Err(CryptoError::InsufficientShares { needed: 3, got: 2 })
        );
    }

    #[test]
    fn parameter_errors() {
        let s = random_secret();
        assert!(shamir_split(&s, 4, 3, &mut OsRng).is_err());
        assert!(shamir_split(&s, 0, 3, &mut OsRng).is_err());
        assert!(shamir_split(&s, 2, 256, &mut OsRng).is_err());
        assert!(shamir_split_at(&s, 2, &[1, 1, 2], &mut OsRng).is_err());
        assert!(shamir_split_at(&s, 2, &[0, 1, 2], &mut OsRng).is_err());
        let shares = shamir_split(&s, 2, 3, &mut OsRng).unwrap();
        assert!(matches!(
            shamir_reconstruct(&[shares[0], shares[0]], 2),
            Err(CryptoError::Parameter(_))
        ));
    }

    #[test]
    fn arbitrary_points_round_trip() {
        let s = random_secret();
        let xs = [3u8, 17, 200, 255, 42];
        let shares = shamir_split_at(&s, 3, &xs, &mut OsRng).unwrap();
        assert_eq!(shares.iter().map(|s| s.x).collect::<Vec<_>>(), xs);
        assert_eq!(shamir_reconstruct(&shares[2..], 3).unwrap(), s);
    }
}
