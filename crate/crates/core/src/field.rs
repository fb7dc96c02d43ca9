//! Arithmetic over the Mersenne prime field `F_p`, `p = 2^31 - 1`, and the
//! fixed-point codec that carries real-valued gradients into and out of it.

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// The field modulus, `2^31 - 1`.
pub const P: u32 = 0x7FFF_FFFF;

/// Bytes per serialized field element.
pub const ELEM_BYTES: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("serialized vector length {0} is not a multiple of 4")]
    BadEncodingLength(usize),
    #[error("element {value} at index {index} is not reduced mod p")]
    NotReduced { index: usize, value: u32 },
    #[error("aggregate element {value} at index {index} outside [{low}, {high}]: aliasing")]
    Aliasing {
        index: usize,
        value: u32,
        low: u64,
        high: u64,
    },
    #[error("{participants} participants exceeds configured maximum {max}")]
    TooManyParticipants { participants: u32, max: u32 },
    #[error("invalid quantization config: {0}")]
    InvalidConfig(String),
}

/// A residue in `[0, p)`.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[repr(transparent)]
pub struct FieldElem(u32);

impl FieldElem {
    pub const ZERO: FieldElem = FieldElem(0);
    pub const ONE: FieldElem = FieldElem(1);

    /// Reduces an arbitrary 64-bit value.
    #[inline]
    pub fn reduce(v: u64) -> Self {
        FieldElem((v % P as u64) as u32)
    }

    /// Accepts only canonical residues.
    #[inline]
    pub fn new(v: u32) -> Option<Self> {
        (v < P).then_some(FieldElem(v))
    }

    #[inline]
    pub fn value(self) -> u32 {
        self.0
    }
}

impl fmt::Debug for FieldElem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl Add for FieldElem {
    type Output = FieldElem;

    #[inline]
    fn add(self, rhs: FieldElem) -> FieldElem {
        let s = self.0 as u64 + rhs.0 as u64;
        FieldElem(if s >= P as u64 { (s - P as u64) as u32 } else { s as u32 })
    }
}

impl Sub for FieldElem {
    type Output = FieldElem;

    #[inline]
    fn sub(self, rhs: FieldElem) -> FieldElem {
        if self.0 >= rhs.0 {
            FieldElem(self.0 - rhs.0)
        } else {
            FieldElem(((self.0 as u64 + P as u64) - rhs.0 as u64) as u32)
        }
    }
}

impl Neg for FieldElem {
    type Output = FieldElem;

    #[inline]
    fn neg(self) -> FieldElem {
        FieldElem::ZERO - self
    }
}

impl AddAssign for FieldElem {
    #[inline]
    fn add_assign(&mut self, rhs: FieldElem) {
        *self = *self + rhs;
    }
}

impl SubAssign for FieldElem {
    #[inline]
    fn sub_assign(&mut self, rhs: FieldElem) {
        *self = *self - rhs;
    }
}

/// Dense vector over `F_p`. Plays the role of gradients, masks and their sums.
#[derive(Clone, PartialEq, Eq, Hash, Default, Serialize)]
pub struct FieldVector(Vec<FieldElem>);

impl FieldVector {
    pub fn zeros(dim: usize) -> Self {
        FieldVector(vec![FieldElem::ZERO; dim])
    }

    pub fn from_elems(elems: Vec<FieldElem>) -> Self {
        FieldVector(elems)
    }

    /// Builds a vector from raw words, rejecting any word `>= p`.
    pub fn from_u32s(words: &[u32]) -> Result<Self, FieldError> {
        words
            .iter()
            .enumerate()
            .map(|(index, &value)| FieldElem::new(value).ok_or(FieldError::NotReduced { index, value }))
            .collect::<Result<Vec<_>, _>>()
            .map(FieldVector)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[FieldElem] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = FieldElem> + '_ {
        self.0.iter().copied()
    }

    pub fn to_u32s(&self) -> Vec<u32> {
        self.0.iter().map(|e| e.0).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|e| e.0 == 0)
    }

    fn check_dims(&self, other: &FieldVector) -> Result<(), FieldError> {
        if self.len() != other.len() {
            return Err(FieldError::DimensionMismatch {
                left: self.len(),
                right: other.len(),
            });
        }
        Ok(())
    }

    pub fn add_assign_vec(&mut self, other: &FieldVector) -> Result<(), FieldError> {
        self.check_dims(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += *b;
        }
        Ok(())
    }

    pub fn sub_assign_vec(&mut self, other: &FieldVector) -> Result<(), FieldError> {
        self.check_dims(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a -= *b;
        }
        Ok(())
    }

    /// Little-endian 4-byte words, no header.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len() * ELEM_BYTES);
        for e in &self.0 {
            out.extend_from_slice(&e.0.to_le_bytes());
        }
        out
    }

    pub fn from_le_bytes(bytes: &[u8]) -> Result<Self, FieldError> {
        if !bytes.len().is_multiple_of(ELEM_BYTES) {
            return Err(FieldError::BadEncodingLength(bytes.len()));
        }
        bytes
            .chunks_exact(ELEM_BYTES)
            .enumerate()
            .map(|(index, c)| {
                let value = u32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                FieldElem::new(value).ok_or(FieldError::NotReduced { index, value })
            })
            .collect::<Result<Vec<_>, _>>()
            .map(FieldVector)
    }
}

impl fmt::Debug for FieldVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.len() <= 8 {
            f.debug_list().entries(self.0.iter()).finish()
        } else {
            write!(f, "FieldVector(len={}, head={:?})", self.len(), &self.0[..4])
        }
    }
}

/// Element-wise `(a + b) mod p`.
pub fn add_vec(a: &FieldVector, b: &FieldVector) -> Result<FieldVector, FieldError> {
    let mut out = a.clone();
    out.add_assign_vec(b)?;
    Ok(out)
}

/// Element-wise `(a - b) mod p`.
pub fn sub_vec(a: &FieldVector, b: &FieldVector) -> Result<FieldVector, FieldError> {
    let mut out = a.clone();
    out.sub_assign_vec(b)?;
    Ok(out)
}

/// Fixed-point codec parameters.
///
/// A gradient element `g` is clipped to `[-g_max, g_max]`, scaled by `scale`
/// and shifted by `offset = scale * g_max` so it lands in `[0, 2 * offset]`.
/// Construction enforces `max_participants * 2 * offset < p`, which keeps any
/// sum of up to `max_participants` encodings from wrapping around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantParams", into = "QuantParams")]
pub struct QuantConfig {
    scale: u32,
    g_max: f64,
    offset: u64,
    max_participants: u32,
}

impl QuantConfig {
    pub const DEFAULT_SCALE: u32 = 1 << 15;
    pub const DEFAULT_G_MAX: f64 = 1024.0;
    pub const DEFAULT_MAX_PARTICIPANTS: u32 = 20;

    pub fn new(scale: u32, g_max: f64, max_participants: u32) -> Result<Self, FieldError> {
        if scale == 0 || !scale.is_power_of_two() {
            return Err(FieldError::InvalidConfig(format!(
                "scale {scale} is not a power of two"
            )));
        }
        if !(g_max.is_finite() && g_max > 0.0) {
            return Err(FieldError::InvalidConfig(format!(
                "g_max {g_max} must be positive and finite"
            )));
        }
        if max_participants == 0 {
            return Err(FieldError::InvalidConfig("max_participants must be at least 1".into()));
        }
        let offset_f = scale as f64 * g_max;
        if offset_f.fract() != 0.0 || offset_f >= P as f64 {
            return Err(FieldError::InvalidConfig(format!(
                "offset scale*g_max = {offset_f} must be an integer below p"
            )));
        }
        let offset = offset_f as u64;
        let span = max_participants as u128 * 2 * offset as u128;
        if span >= P as u128 {
            return Err(FieldError::InvalidConfig(format!(
                "no-aliasing constraint violated: {max_participants} * 2 * {offset} = {span} >= p"
            )));
        }
        Ok(QuantConfig {
            scale,
            g_max,
            offset,
            max_participants,
        })
    }

    pub fn scale(&self) -> u32 {
        self.scale
    }

    pub fn g_max(&self) -> f64 {
        self.g_max
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn max_participants(&self) -> u32 {
        self.max_participants
    }

    /// Worst-case per-element decode error for `k` summed encodings.
    pub fn error_bound(&self, k: u32) -> f64 {
        k as f64 / (2.0 * self.scale as f64)
    }
}

/// Unvalidated serialized form of [`QuantConfig`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: u32,
    pub g_max: f64,
    pub max_participants: u32,
}

impl TryFrom<QuantParams> for QuantConfig {
    type Error = FieldError;

    fn try_from(p: QuantParams) -> Result<Self, FieldError> {
        QuantConfig::new(p.scale, p.g_max, p.max_participants)
    }
}

impl From<QuantConfig> for QuantParams {
    fn from(c: QuantConfig) -> Self {
        QuantParams {
            scale: c.scale,
            g_max: c.g_max,
            max_participants: c.max_participants,
        }
    }
}

impl Default for QuantConfig {
    fn default() -> Self {
        QuantConfig::new(Self::DEFAULT_SCALE, Self::DEFAULT_G_MAX, Self::DEFAULT_MAX_PARTICIPANTS)
            .expect("default quantization parameters satisfy the aliasing bound")
    }
}

/// Counts inputs that needed special handling during quantization.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantDiagnostics {
    pub non_finite: u64,
    pub clipped: u64,
}

#[inline]
fn quantize_one(g: f64, cfg: &QuantConfig, diag: &mut QuantDiagnostics) -> FieldElem {
    if !g.is_finite() {
        // Infinities are non-finite too; both map to the offset (0.0).
        diag.non_finite += 1;
        return FieldElem(cfg.offset as u32);
    }
    if g.abs() > cfg.g_max {
        diag.clipped += 1;
    }
    let clipped = g.clamp(-cfg.g_max, cfg.g_max);
    // f64::round rounds half away from zero.
    let q = (clipped * cfg.scale as f64).round() as i64;
    FieldElem((q + cfg.offset as i64) as u32)
}

/// Maps a real gradient into the field. Total: out-of-range values clip,
/// non-finite values encode as zero.
pub fn quantize(g: &[f64], cfg: &QuantConfig) -> FieldVector {
    let mut diag = QuantDiagnostics::default();
    quantize_with_diagnostics(g, cfg, &mut diag)
}

pub fn quantize_with_diagnostics(g: &[f64], cfg: &QuantConfig, diag: &mut QuantDiagnostics) -> FieldVector {
    FieldVector(g.iter().map(|&x| quantize_one(x, cfg, diag)).collect())
}

/// Removes the `k * offset` shift from a sum of `k` encodings and rescales.
pub fn decode_aggregate(sum: &FieldVector, participants: u32, cfg: &QuantConfig) -> Result<Vec<f64>, FieldError> {
    if participants > cfg.max_participants {
        return Err(FieldError::TooManyParticipants {
            participants,
            max: cfg.max_participants,
        });
    }
    // Each encoding lies in [0, 2B], so a sum of k lies in [0, 2kB] and the
    // signed aggregate is sum - kB.
    let shift = participants as u64 * cfg.offset;
    let high = 2 * shift;
    sum.iter()
        .enumerate()
        .map(|(index, e)| {
            let v = e.0 as u64;
            if v > high {
                return Err(FieldError::Aliasing {
                    index,
                    value: e.0,
                    low: 0,
                    high,
                });
            }
            Ok((v as i64 - shift as i64) as f64 / cfg.scale as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fv(words: &[u32]) -> FieldVector {
        FieldVector::from_u32s(words).unwrap()
    }

    fn cfg() -> QuantConfig {
        QuantConfig::default()
    }

    #[test]
    fn add_wraps_at_modulus() {
        assert_eq!(add_vec(&fv(&[P - 1]), &fv(&[1])).unwrap(), fv(&[0]));
        let b = fv(&[3, 9, P - 1]);
        assert_eq!(add_vec(&FieldVector::zeros(3), &b).unwrap(), b);
        assert_eq!(add_vec(&fv(&[5, 7]), &fv(&[10, P - 2])).unwrap(), fv(&[15, 5]));
    }

    #[test]
    fn sub_wraps_negative() {
        let a = fv(&[1, 2, P - 1]);
        assert!(sub_vec(&a, &a).unwrap().is_zero());
        assert_eq!(sub_vec(&fv(&[0]), &fv(&[1])).unwrap(), fv(&[P - 1]));
        assert_eq!(sub_vec(&fv(&[15, 5]), &fv(&[10, P - 2])).unwrap(), fv(&[5, 7]));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let err = add_vec(&fv(&[1, 2]), &fv(&[1])).unwrap_err();
        assert_eq!(err, FieldError::DimensionMismatch { left: 2, right: 1 });
        assert!(sub_vec(&fv(&[1]), &fv(&[])).is_err());
    }

    #[test]
    fn scalar_arithmetic_matches_u64_oracle() {
        let samples = [0u32, 1, 2, 12345, P / 2, P - 2, P - 1];
        for &a in &samples {
            for &b in &samples {
                let (fa, fb) = (FieldElem(a), FieldElem(b));
                assert_eq!((fa + fb).0 as u64, (a as u64 + b as u64) % P as u64);
                assert_eq!((fa - fb).0 as u64, (a as u64 + P as u64 - b as u64) % P as u64);
            }
        }
        assert_eq!(-FieldElem::ONE, FieldElem(P - 1));
        assert_eq!(FieldElem::reduce(u64::MAX).0 as u64, u64::MAX % P as u64);
    }

    #[test]
    fn serialization_is_little_endian_words() {
        let v = fv(&[1, 0x0102_0304]);
        assert_eq!(v.to_le_bytes(), vec![1, 0, 0, 0, 4, 3, 2, 1]);
        assert_eq!(FieldVector::from_le_bytes(&v.to_le_bytes()).unwrap(), v);
        assert!(matches!(
            FieldVector::from_le_bytes(&[0xFF, 0xFF, 0xFF, 0xFF]),
            Err(FieldError::NotReduced { index: 0, .. })
        ));
        assert!(matches!(
            FieldVector::from_le_bytes(&[0; 5]),
            Err(FieldError::BadEncodingLength(5))
        ));
    }

    #[test]
    fn quantize_known_values() {
        let c = cfg();
        assert_eq!(c.offset(), 1 << 25);
        assert_eq!(quantize(&[0.0], &c).to_u32s(), vec![33_554_432]);
        assert_eq!(quantize(&[1.0], &c).to_u32s(), vec![33_587_200]);
        assert_eq!(quantize(&[1e9], &c), quantize(&[1024.0], &c));
        assert_eq!(quantize(&[-1e9], &c).to_u32s(), vec![0]);
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        let c = cfg();
        let half = 0.5 / c.scale() as f64;
        let b = c.offset() as u32;
        assert_eq!(quantize(&[half, -half], &c).to_u32s(), vec![b + 1, b - 1]);
    }

    #[test]
    fn non_finite_inputs_encode_as_zero_and_are_counted() {
        let c = cfg();
        let mut diag = QuantDiagnostics::default();
        let out = quantize_with_diagnostics(&[f64::NAN, f64::INFINITY, f64::NEG_INFINITY, 2000.0], &c, &mut diag);
        let b = c.offset() as u32;
        assert_eq!(out.to_u32s()[..3], [b, b, b]);
        assert_eq!(
            diag,
            QuantDiagnostics {
                non_finite: 3,
                clipped: 1
            }
        );
    }

    #[test]
    fn decode_examples() {
        let c = cfg();
        assert_eq!(decode_aggregate(&quantize(&[0.0], &c), 1, &c).unwrap(), vec![0.0]);

        let mut sum = FieldVector::zeros(1);
        for _ in 0..20 {
            sum.add_assign_vec(&quantize(&[0.5], &c)).unwrap();
        }
        let got = decode_aggregate(&sum, 20, &c).unwrap()[0];
        assert!((got - 10.0).abs() <= 20.0 / (2.0 * 32768.0));

        let one = 1.0;
        let sum = add_vec(&quantize(&[one], &c), &quantize(&[-one], &c)).unwrap();
        assert_eq!(decode_aggregate(&sum, 2, &c).unwrap(), vec![0.0]);
    }

    #[test]
    fn decode_detects_aliasing() {
        let c = cfg();
        // Below k*B is a negative aggregate, not aliasing.
        let negative = fv(&[(2 * c.offset() - c.scale() as u64) as u32]);
        assert_eq!(decode_aggregate(&negative, 2, &c).unwrap(), vec![-1.0]);
        assert_eq!(decode_aggregate(&fv(&[0]), 2, &c).unwrap(), vec![-2048.0]);
        let above = fv(&[(4 * c.offset() + 1) as u32]);
        assert!(matches!(
            decode_aggregate(&above, 2, &c),
            Err(FieldError::Aliasing { .. })
        ));
        assert!(matches!(
            decode_aggregate(&fv(&[0]), 21, &c),
            Err(FieldError::TooManyParticipants { .. })
        ));
    }

    #[test]
    fn config_validation() {
        // The literal 2^16 scale with 20 participants and |g| < 2^10 wraps.
        assert!(QuantConfig::new(1 << 16, 1024.0, 20).is_err());
        assert!(QuantConfig::new(1 << 15, 1024.0, 20).is_ok());
        assert!(QuantConfig::new(3, 1.0, 1).is_err());
        assert!(QuantConfig::new(1 << 15, 0.1, 1).is_err());
        assert!(QuantConfig::new(1 << 15, f64::NAN, 1).is_err());
        assert!(QuantConfig::new(1 << 15, 1.0, 0).is_err());
    }

    fn arb_vec(len: usize) -> impl Strategy<Value = FieldVector> {
        prop::collection::vec(0..P, len).prop_map(|w| FieldVector::from_u32s(&w).unwrap())
    }

    proptest! {
        #[test]
        fn ring_laws((a, b, c) in (1usize..32).prop_flat_map(|n| (arb_vec(n), arb_vec(n), arb_vec(n)))) {
            let ab = add_vec(&a, &b).unwrap();
            prop_assert_eq!(&ab, &add_vec(&b, &a).unwrap());
            prop_assert_eq!(
                add_vec(&ab, &c).unwrap(),
                add_vec(&a, &add_vec(&b, &c).unwrap()).unwrap()
            );
            prop_assert_eq!(sub_vec(&ab, &b).unwrap(), a);
        }

        #[test]
        fn quantize_stays_in_range(g in prop::collection::vec(prop::num::f64::ANY, 0..64)) {
            let c = cfg();
            for e in quantize(&g, &c).iter() {
                prop_assert!(e.value() <= 2 * c.offset() as u32);
                prop_assert!(e.value() < P);
            }
        }

        #[test]
        fn aggregate_round_trip_within_bound(
            (k, grads) in (1u32..=20).prop_flat_map(|k| {
                (Just(k), prop::collection::vec(prop::collection::vec(-1024.0f64..=1024.0, 8), k as usize))
            })
        ) {
            let c = cfg();
            let mut sum = FieldVector::zeros(8);
            for g in &grads {
                sum.add_assign_vec(&quantize(g, &c)).unwrap();
            }
            let decoded = decode_aggregate(&sum, k, &c).unwrap();
            for j in 0..8 {
                let truth: f64 = grads.iter().map(|g| g[j]).sum();
                prop_assert!((decoded[j] - truth).abs() <= c.error_bound(k) + 1e-9);
            }
        }
    }
}
