//! Selective encryption of gradient coordinates.
//!
//! A mask picks the top share of coordinates by significance score; the
//! attacker then sees the unmasked coordinates exactly and the masked ones
//! either flagged unknown (`Exclude`) or replaced by bounded noise. The mock
//! cipher stands in for an additively homomorphic scheme: it keeps the
//! payload as plain f64 behind a key check, so aggregation of ciphertexts is
//! bitwise identical to plaintext aggregation, which is the property the
//! federated protocol relies on.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::FlatGradient;
use crate::significance::SignificanceScores;

#[derive(Clone, Debug, PartialEq)]
pub struct EncryptionMask {
    pub bits: Vec<bool>,
    pub requested_ratio: f64,
}

impl EncryptionMask {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Indices of masked coordinates, ascending.
    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, b)| b.then_some(i))
            .collect()
    }

    pub fn from_bits(bits: Vec<bool>) -> EncryptionMask {
        let ones = bits.iter().filter(|b| **b).count();
        let ratio = if bits.is_empty() {
            0.0
        } else {
            ones as f64 / bits.len() as f64
        };
        EncryptionMask {
            bits,
            requested_ratio: ratio,
        }
    }
}

/// Selects the ceil(ratio * m) highest-scoring coordinates. Ties break
/// toward the lower index, so masks for increasing ratios are nested.
pub fn top_s_mask(scores: &SignificanceScores, ratio: f64) -> Result<EncryptionMask> {
    if !(ratio.is_finite() && (0.0..=1.0).contains(&ratio)) {
        return Err(Error::InvalidRatio(ratio));
    }
    let m = scores.scores.len();
    if m == 0 {
        return Err(Error::Empty("significance scores"));
    }
    if scores.scores.iter().any(|v| v.is_nan()) {
        return Err(Error::Config("significance scores contain NaN".into()));
    }
    let s = ((ratio * m as f64).ceil() as usize).min(m);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_unstable_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .expect("NaN filtered above")
            .then(a.cmp(&b))
    });
    let mut bits = vec![false; m];
    for &i in &order[..s] {
        bits[i] = true;
    }
    Ok(EncryptionMask {
        bits,
        requested_ratio: ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SubstitutionMode {
    /// Masked coordinates are flagged unknown and carry 0.
    Exclude,
    /// Masked coordinates are replaced by uniform noise in [-xi, xi] and the
    /// attacker cannot tell them apart from real values.
    BoundedNoise { xi: f64 },
}

/// What the adversary observes of a gradient after selective encryption.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackerView {
    pub values: Vec<f64>,
    /// Coordinates the attacker treats as trustworthy observations.
    pub known: Vec<bool>,
    pub mode: SubstitutionMode,
}

impl AttackerView {
    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|b| **b).count()
    }
}

pub fn attacker_view(
    g0: &FlatGradient,
    mask: &EncryptionMask,
    mode: SubstitutionMode,
    seed: u64,
) -> Result<AttackerView> {
    if mask.bits.len() != g0.values.len() {
        return Err(Error::LengthMismatch {
            context: "mask vs gradient",
            expected: g0.values.len(),
            got: mask.bits.len(),
        });
    }
    match mode {
        SubstitutionMode::Exclude => {
            let values = g0
                .values
                .iter()
                .zip(&mask.bits)
                .map(|(&v, &m)| if m { 0.0 } else { v })
                .collect();
            let known = mask.bits.iter().map(|&m| !m).collect();
            Ok(AttackerView {
                values,
                known,
                mode,
            })
        }
        SubstitutionMode::BoundedNoise { xi } => {
            if !(xi.is_finite() && xi >= 0.0) {
                return Err(Error::InvalidNoiseBound(xi));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let values = g0
                .values
                .iter()
                .zip(&mask.bits)
                .map(|(&v, &m)| {
                    if m {
                        rng.random_range(-xi..=xi)
                    } else {
                        v
                    }
                })
                .collect();
            Ok(AttackerView {
                values,
                known: vec![true; g0.values.len()],
                mode,
            })
        }
    }
}

/// Stand-in for an additively homomorphic ciphertext. The payload is plain
/// data behind an opaque type plus key discipline; sums of ciphertexts
/// decrypt to exactly the f64 sums of their plaintexts.
#[derive(Clone, Debug, PartialEq)]
pub struct MockCiphertext {
    payload: Vec<f64>,
    key_id: u64,
}

impl MockCiphertext {
    pub fn len(&self) -> usize {
        self.payload.len()
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

pub fn mock_encrypt(values: &[f64], key_id: u64) -> MockCiphertext {
    MockCiphertext {
        payload: values.to_vec(),
        key_id,
    }
}

pub fn mock_add(a: &MockCiphertext, b: &MockCiphertext) -> Result<MockCiphertext> {
    if a.key_id != b.key_id {
        return Err(Error::KeyMismatch {
            have: b.key_id,
            want: a.key_id,
        });
    }
    if a.payload.len() != b.payload.len() {
        return Err(Error::CipherLength {
            a: a.payload.len(),
            b: b.payload.len(),
        });
    }
    Ok(MockCiphertext {
        payload: a
            .payload
            .iter()
            .zip(&b.payload)
            .map(|(x, y)| x + y)
            .collect(),
        key_id: a.key_id,
    })
}

pub fn mock_decrypt(c: &MockCiphertext, key_id: u64) -> Result<Vec<f64>> {
    if c.key_id != key_id {
        return Err(Error::KeyMismatch {
            have: c.key_id,
            want: key_id,
        });
    }
    Ok(c.payload.clone())
}

/// Mask wire format: u64 little-endian bit count, then packed bits,
/// LSB-first within each byte, zero padding in the final byte.
pub fn mask_to_bytes(bits: &[bool]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + bits.len().div_ceil(8));
    out.extend_from_slice(&(bits.len() as u64).to_le_bytes());
    let mut byte = 0u8;
    for (i, &b) in bits.iter().enumerate() {
        if b {
            byte |= 1 << (i % 8);
        }
        if i % 8 == 7 {
            out.push(byte);
            byte = 0;
        }
    }
    if bits.len() % 8 != 0 {
        out.push(byte);
    }
    out
}

pub fn mask_from_bytes(bytes: &[u8]) -> Result<Vec<bool>> {
    if bytes.len() < 8 {
        return Err(Error::MaskFormat(format!(
            "{} bytes is too short for the length header",
            bytes.len()
        )));
    }
    let count = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body = &bytes[8..];
    let want = count.div_ceil(8);
    if body.len() != want {
        return Err(Error::MaskFormat(format!(
            "{count} bits need {want} payload bytes, found {}",
            body.len()
        )));
    }
    let mut bits = Vec::with_capacity(count);
    for i in 0..count {
        bits.push(body[i / 8] >> (i % 8) & 1 == 1);
    }
    // Padding bits beyond `count` must be zero.
    if count % 8 != 0 {
        let last = body[count / 8];
        if last >> (count % 8) != 0 {
            return Err(Error::MaskFormat(
                "nonzero padding bits in final byte".into(),
            ));
        }
    }
    Ok(bits)
}

pub fn write_mask(path: &Path, mask: &EncryptionMask) -> Result<()> {
    fs::write(path, mask_to_bytes(&mask.bits))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_mask(path: &Path) -> Result<EncryptionMask> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(EncryptionMask::from_bits(mask_from_bytes(&bytes)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamLayout, ParamRange, ParamRole};
    use crate::significance::{MetricId, SignificanceScores};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn scores(v: Vec<f64>) -> SignificanceScores {
        SignificanceScores {
            metric: MetricId::Grad,
            scores: v,
            compute_seconds: 0.0,
        }
    }

    fn grad(values: Vec<f64>) -> FlatGradient {
        let total = values.len();
        FlatGradient {
            values,
            layout: Arc::new(ParamLayout {
                ranges: vec![ParamRange {
                    layer: 0,
                    role: ParamRole::Weight,
                    start: 0,
                    end: total,
                }],
                total,
                layers: 1,
            }),
        }
    }

    #[test]
    fn top_s_picks_highest_with_index_tie_break() {
        let s = scores(vec![0.5, 2.0, 2.0, 0.1, 2.0]);
        let m = top_s_mask(&s, 0.4).unwrap(); // ceil(0.4*5) = 2
        assert_eq!(m.indices(), vec![1, 2]);
        let m = top_s_mask(&s, 0.6).unwrap(); // 3
        assert_eq!(m.indices(), vec![1, 2, 4]);
        let m = top_s_mask(&s, 0.0).unwrap();
        assert_eq!(m.count_ones(), 0);
        let m = top_s_mask(&s, 1.0).unwrap();
        assert_eq!(m.count_ones(), 5);
    }

    #[test]
    fn top_s_rejects_bad_ratio_and_nan_scores() {
        let s = scores(vec![1.0, 2.0]);
        assert!(matches!(top_s_mask(&s, -0.1), Err(Error::InvalidRatio(_))));
        assert!(matches!(top_s_mask(&s, 1.1), Err(Error::InvalidRatio(_))));
        assert!(matches!(
            top_s_mask(&s, f64::NAN),
            Err(Error::InvalidRatio(_))
        ));
        let bad = scores(vec![1.0, f64::NAN]);
        assert!(top_s_mask(&bad, 0.5).is_err());
    }

    #[test]
    fn exclude_view_zeros_and_flags_masked_coords() {
        let g = grad(vec![1.0, -2.0, 3.0, -4.0]);
        let mask = EncryptionMask::from_bits(vec![false, true, false, true]);
        let v = attacker_view(&g, &mask, SubstitutionMode::Exclude, 0).unwrap();
        assert_eq!(v.values, vec![1.0, 0.0, 3.0, 0.0]);
        assert_eq!(v.known, vec![true, false, true, false]);
        assert_eq!(v.known_count(), 2);
    }

    #[test]
    fn bounded_noise_view_is_seeded_and_bounded() {
        let g = grad(vec![1.0; 64]);
        let mask = EncryptionMask::from_bits((0..64).map(|i| i % 2 == 0).collect());
        let view = |seed| {
            attacker_view(&g, &mask, SubstitutionMode::BoundedNoise { xi: 1e-3 }, seed).unwrap()
        };
        let a = view(7);
        let b = view(7);
        let c = view(8);
        assert_eq!(a, b);
        assert_ne!(a.values, c.values);
        assert!(a.known.iter().all(|&k| k));
        for (i, &v) in a.values.iter().enumerate() {
            if i % 2 == 0 {
                assert!(v.abs() <= 1e-3, "noise out of bounds at {i}: {v}");
            } else {
                assert_eq!(v, 1.0);
            }
        }
    }

    #[test]
    fn bounded_noise_rejects_bad_xi() {
        let g = grad(vec![1.0]);
        let mask = EncryptionMask::from_bits(vec![true]);
        for xi in [-1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                attacker_view(&g, &mask, SubstitutionMode::BoundedNoise { xi }, 0),
                Err(Error::InvalidNoiseBound(_))
            ));
        }
    }

    #[test]
    fn view_rejects_length_mismatch() {
        let g = grad(vec![1.0, 2.0]);
        let mask = EncryptionMask::from_bits(vec![true]);
        assert!(matches!(
            attacker_view(&g, &mask, SubstitutionMode::Exclude, 0),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn cipher_round_trip_and_homomorphic_add_are_bitwise() {
        let a = vec![1.5, -2.25, 1e-300, 3.7e10];
        let b = vec![0.1, 2.25, -1e-300, -1.2e10];
        let ca = mock_encrypt(&a, 42);
        let cb = mock_encrypt(&b, 42);
        assert_eq!(mock_decrypt(&ca, 42).unwrap(), a);
        let sum = mock_decrypt(&mock_add(&ca, &cb).unwrap(), 42).unwrap();
        let plain: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        assert_eq!(
            sum.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            plain.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn cipher_enforces_key_and_length() {
        let ca = mock_encrypt(&[1.0], 1);
        let cb = mock_encrypt(&[1.0], 2);
        assert!(matches!(mock_add(&ca, &cb), Err(Error::KeyMismatch { .. })));
        assert!(matches!(
            mock_decrypt(&ca, 9),
            Err(Error::KeyMismatch { have: 1, want: 9 })
        ));
        let cc = mock_encrypt(&[1.0, 2.0], 1);
        assert!(matches!(mock_add(&ca, &cc), Err(Error::CipherLength { .. })));
    }

    #[test]
    fn mask_bytes_layout_is_lsb_first() {
        // bits 0 and 3 set -> byte 0b0000_1001, header says 4 bits.
        let bytes = mask_to_bytes(&[true, false, false, true]);
        assert_eq!(&bytes[..8], &4u64.to_le_bytes());
        assert_eq!(bytes[8], 0b0000_1001);
        assert_eq!(bytes.len(), 9);
    }

    #[test]
    fn mask_from_bytes_rejects_malformed_input() {
        assert!(mask_from_bytes(&[0; 4]).is_err());
        // Header says 4 bits but two payload bytes.
        let mut bytes = 4u64.to_le_bytes().to_vec();
        bytes.extend_from_slice(&[0b1001, 0]);
        assert!(mask_from_bytes(&bytes).is_err());
        // Nonzero padding above bit 4.
        let mut bytes = 4u64.to_le_bytes().to_vec();
        bytes.push(0b0011_1001);
        assert!(matches!(
            mask_from_bytes(&bytes),
            Err(Error::MaskFormat(_))
        ));
    }

    proptest! {
        #[test]
        fn masks_nest_as_ratio_grows(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..80),
            r1 in 0.0f64..1.0,
            r2 in 0.0f64..1.0,
        ) {
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            let s = scores(vals);
            let a = top_s_mask(&s, lo).unwrap();
            let b = top_s_mask(&s, hi).unwrap();
            for (x, y) in a.bits.iter().zip(&b.bits) {
                prop_assert!(!x | y, "lower-ratio mask not nested in higher");
            }
        }

        #[test]
        fn mask_count_is_ceil(vals in proptest::collection::vec(-1e3f64..1e3, 1..50), r in 0.0f64..1.0) {
            let m = vals.len();
            let got = top_s_mask(&scores(vals), r).unwrap().count_ones();
            prop_assert_eq!(got, ((r * m as f64).ceil() as usize).min(m));
        }

        // Powers of two keep f64 multiplication exact, so the score order
        // (ties included) is preserved verbatim.
        #[test]
        fn mask_invariant_under_positive_scaling(
            vals in proptest::collection::vec(0.0f64..1e3, 1..50),
            e in -20i32..20,
            r in 0.0f64..1.0,
        ) {
            let c = (2.0f64).powi(e);
            let a = top_s_mask(&scores(vals.clone()), r).unwrap();
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let b = top_s_mask(&scores(scaled), r).unwrap();
            prop_assert_eq!(a.bits, b.bits);
        }

        #[test]
        fn mask_bytes_round_trip(bits in proptest::collection::vec(any::<bool>(), 0..200)) {
            let bytes = mask_to_bytes(&bits);
            prop_assert_eq!(mask_from_bytes(&bytes).unwrap(), bits);
        }
    }
}
