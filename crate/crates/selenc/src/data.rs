//! Dataset input: CIFAR binary records and synthetic images.
//!
//! CIFAR-10 records are 3073 bytes (label, then 3072 channel-major pixel
//! bytes R,G,B); CIFAR-100 records are 3074 bytes (coarse label, fine label,
//! pixels). Pixels map to f64 as byte/255. The synthetic source needs no
//! files: each image is a sum of three seeded 2-D cosine waves, min-max
//! normalized to [0, 1], with labels assigned round-robin.

use std::f64::consts::TAU;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::mix_seed;

pub const CIFAR10_RECORD: usize = 3073;
pub const CIFAR100_RECORD: usize = 3074;
const CIFAR_PIXELS: usize = 3 * 32 * 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Cifar10,
    Cifar100,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// Channel-major [c, h, w] pixels in [0, 1].
    pub pixels: Vec<f64>,
    pub shape: [usize; 3],
    pub label: usize,
    pub source: Source,
    /// CIFAR-100 coarse label; None elsewhere.
    pub coarse: Option<u8>,
}

impl LabeledImage {
    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }
}

fn check_record_count(len: usize, record: usize) -> Result<usize> {
    if len % record != 0 {
        return Err(Error::RecordTruncated {
            offset: (len / record) * record,
            record,
        });
    }
    Ok(len / record)
}

fn pixels_from_bytes(bytes: &[u8]) -> Vec<f64> {
    bytes.iter().map(|&b| b as f64 / 255.0).collect()
}

pub fn parse_cifar10(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    let n = check_record_count(bytes.len(), CIFAR10_RECORD)?;
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR10_RECORD..(r + 1) * CIFAR10_RECORD];
        if rec[0] > 9 {
            return Err(Error::InvalidLabel {
                record: r,
                value: rec[0],
                max: 9,
            });
        }
        out.push(LabeledImage {
            pixels: pixels_from_bytes(&rec[1..]),
            shape: [3, 32, 32],
            label: rec[0] as usize,
            source: Source::Cifar10,
            coarse: None,
        });
    }
    Ok(out)
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Vec<LabeledImage>> {
    let n = check_record_count(bytes.len(), CIFAR100_RECORD)?;
    let mut out = Vec::with_capacity(n);
    for r in 0..n {
        let rec = &bytes[r * CIFAR100_RECORD..(r + 1) * CIFAR100_RECORD];
        if rec[0] > 19 {
            return Err(Error::InvalidLabel {
                record: r,
                value: rec[0],
                max: 19,
            });
        }
        if rec[1] > 99 {
            return Err(Error::InvalidLabel {
                record: r,
                value: rec[1],
                max: 99,
            });
        }
        out.push(LabeledImage {
            pixels: pixels_from_bytes(&rec[2..]),
            shape: [3, 32, 32],
            label: rec[1] as usize,
            source: Source::Cifar100,
            coarse: Some(rec[0]),
        });
    }
    Ok(out)
}

fn pixel_to_byte(p: f64) -> Result<u8> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!(
            "pixel {p} outside [0, 1], cannot encode"
        )));
    }
    Ok((p * 255.0).round() as u8)
}

pub fn write_cifar10(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * CIFAR10_RECORD);
    for img in images {
        if img.pixels.len() != CIFAR_PIXELS || img.shape != [3, 32, 32] {
            return Err(Error::ShapeMismatch {
                context: "cifar10 writer",
                expected: vec![3, 32, 32],
                got: img.shape.to_vec(),
            });
        }
        if img.label > 9 {
            return Err(Error::InvalidLabel {
                record: 0,
                value: img.label as u8,
                max: 9,
            });
        }
        out.push(img.label as u8);
        for &p in &img.pixels {
            out.push(pixel_to_byte(p)?);
        }
    }
    Ok(out)
}

pub fn write_cifar100(images: &[LabeledImage]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(images.len() * CIFAR100_RECORD);
    for img in images {
        if img.pixels.len() != CIFAR_PIXELS || img.shape != [3, 32, 32] {
            return Err(Error::ShapeMismatch {
                context: "cifar100 writer",
                expected: vec![3, 32, 32],
                got: img.shape.to_vec(),
            });
        }
        let coarse = img.coarse.unwrap_or(0);
        if coarse > 19 || img.label > 99 {
            return Err(Error::InvalidLabel {
                record: 0,
                value: coarse.max(img.label as u8),
                max: 99,
            });
        }
        out.push(coarse);
        out.push(img.label as u8);
        for &p in &img.pixels {
            out.push(pixel_to_byte(p)?);
        }
    }
    Ok(out)
}

pub fn read_cifar10_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cifar10(&bytes)
}

pub fn read_cifar100_file(path: &Path) -> Result<Vec<LabeledImage>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_cifar100(&bytes)
}

/// Deterministic synthetic images of any shape: per channel, the sum of
/// three random-frequency cosine waves, then min-max normalized per image.
/// Labels cycle 0..classes.
pub fn synth_images(
    count: usize,
    seed: u64,
    classes: usize,
    shape: [usize; 3],
) -> Vec<LabeledImage> {
    let [c, h, w] = shape;
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, i as u64));
            let mut pixels = Vec::with_capacity(c * h * w);
            for _ in 0..c {
                let waves: Vec<(f64, f64, f64, f64)> = (0..3)
                    .map(|_| {
                        (
                            rng.random_range(0.5..1.0),
                            rng.random_range(0.5..3.0),
                            rng.random_range(0.5..3.0),
                            rng.random_range(0.0..TAU),
                        )
                    })
                    .collect();
                for pi in 0..h {
                    for pj in 0..w {
                        let mut v = 0.0;
                        for &(a, fi, fj, phase) in &waves {
                            v += a
                                * (TAU * (fi * pi as f64 / h as f64 + fj * pj as f64 / w as f64)
                                    + phase)
                                    .cos();
                        }
                        pixels.push(v);
                    }
                }
            }
            let lo = pixels.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi > lo {
                for p in &mut pixels {
                    *p = (*p - lo) / (hi - lo);
                }
            } else {
                pixels.fill(0.5);
            }
            LabeledImage {
                pixels,
                shape,
                label: i % classes,
                source: Source::Synthetic,
                coarse: None,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn fake_cifar10(records: usize) -> Vec<u8> {
        let mut bytes = Vec::with_capacity(records * CIFAR10_RECORD);
        for r in 0..records {
            bytes.push((r % 10) as u8);
            for i in 0..CIFAR_PIXELS {
                bytes.push(((r * 31 + i * 7) % 256) as u8);
            }
        }
        bytes
    }

    #[test]
    fn cifar10_parse_maps_bytes_to_unit_interval() {
        let bytes = fake_cifar10(3);
        let imgs = parse_cifar10(&bytes).unwrap();
        assert_eq!(imgs.len(), 3);
        assert_eq!(imgs[1].label, 1);
        assert_eq!(imgs[0].shape, [3, 32, 32]);
        assert_eq!(imgs[0].pixels[0], bytes[1] as f64 / 255.0);
        assert_eq!(
            imgs[2].pixels[CIFAR_PIXELS - 1],
            bytes[3 * CIFAR10_RECORD - 1] as f64 / 255.0
        );
        assert!(imgs
            .iter()
            .all(|im| im.pixels.iter().all(|p| (0.0..=1.0).contains(p))));
    }

    #[test]
    fn cifar10_round_trips_bytes_exactly() {
        let bytes = fake_cifar10(4);
        let imgs = parse_cifar10(&bytes).unwrap();
        assert_eq!(write_cifar10(&imgs).unwrap(), bytes);
    }

    #[test]
    fn cifar100_round_trips_and_uses_fine_label() {
        let mut bytes = Vec::new();
        for r in 0..3u8 {
            bytes.push(r);             // coarse
            bytes.push(99 - r);        // fine
            bytes.extend((0..CIFAR_PIXELS).map(|i| ((i + r as usize) % 256) as u8));
        }
        let imgs = parse_cifar100(&bytes).unwrap();
        assert_eq!(imgs[0].label, 99);
        assert_eq!(imgs[2].coarse, Some(2));
        assert_eq!(write_cifar100(&imgs).unwrap(), bytes);
    }

    #[test]
    fn truncated_stream_reports_partial_record_offset() {
        let mut bytes = fake_cifar10(2);
        bytes.push(0);
        match parse_cifar10(&bytes) {
            Err(Error::RecordTruncated { offset, record }) => {
                assert_eq!(offset, 2 * CIFAR10_RECORD);
                assert_eq!(record, CIFAR10_RECORD);
            }
            other => panic!("expected RecordTruncated, got {other:?}"),
        }
    }

    #[test]
    fn invalid_labels_are_rejected_with_position() {
        let mut bytes = fake_cifar10(2);
        bytes[CIFAR10_RECORD] = 10; // second record's label
        match parse_cifar10(&bytes) {
            Err(Error::InvalidLabel { record, value, max }) => {
                assert_eq!((record, value, max), (1, 10, 9));
            }
            other => panic!("expected InvalidLabel, got {other:?}"),
        }

        let mut bytes = vec![20u8, 0];
        bytes.extend(std::iter::repeat_n(0u8, CIFAR_PIXELS));
        assert!(matches!(
            parse_cifar100(&bytes),
            Err(Error::InvalidLabel { max: 19, .. })
        ));
    }

    #[test]
    fn synth_images_are_deterministic_normalized_round_robin() {
        let a = synth_images(7, 11, 3, [1, 8, 8]);
        let b = synth_images(7, 11, 3, [1, 8, 8]);
        assert_eq!(a, b);
        let c = synth_images(7, 12, 3, [1, 8, 8]);
        assert_ne!(a, c);

        for (i, img) in a.iter().enumerate() {
            assert_eq!(img.label, i % 3);
            assert_eq!(img.pixels.len(), 64);
            let lo = img.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = img.pixels.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(lo, 0.0);
            assert_eq!(hi, 1.0);
        }

        // Images differ from each other.
        assert_ne!(a[0].pixels, a[1].pixels);
        // Multi-channel shape works.
        let rgb = synth_images(2, 5, 10, [3, 16, 16]);
        assert_eq!(rgb[0].pixels.len(), 3 * 256);
    }

    proptest! {
        #[test]
        fn parse_never_panics_on_arbitrary_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..8000)) {
            let _ = parse_cifar10(&bytes);
            let _ = parse_cifar100(&bytes);
        }
    }
}
