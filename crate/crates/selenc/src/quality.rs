//! Reconstruction quality metrics for images in [0, 1].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub mse: f64,
    /// Infinite for a perfect reconstruction; serialized as null in JSON.
    #[serde(with = "option_inf")]
    pub psnr: f64,
    pub ssim: f64,
}

pub(crate) mod option_inf {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_some(v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Empty("quality metric input"));
    }
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            context: "quality metric operands",
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| {
            let d = x - y;
            d * d
        })
        .sum();
    Ok(sum / a.len() as f64)
}

/// Peak signal-to-noise ratio in dB for unit dynamic range.
pub fn psnr(mse: f64) -> f64 {
    if mse <= 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

/// Mean SSIM over non-overlapping 8x8 windows of the channel-mean image.
/// Images smaller than one window fall back to a single global window;
/// trailing rows/columns that do not fill a window are ignored.
pub fn ssim(a: &[f64], b: &[f64], shape: [usize; 3]) -> Result<f64> {
    check_pair(a, b)?;
    let [c, h, w] = shape;
    if c * h * w != a.len() {
        return Err(Error::ShapeMismatch {
            context: "ssim",
            expected: shape.to_vec(),
            got: vec![a.len()],
        });
    }
    let ga = to_gray(a, c, h, w);
    let gb = to_gray(b, c, h, w);

    let (th, tw) = (h / SSIM_WINDOW, w / SSIM_WINDOW);
    if th == 0 || tw == 0 {
        return Ok(window_ssim(&ga, &gb, w, 0, 0, h, w));
    }
    let mut total = 0.0;
    for ti in 0..th {
        for tj in 0..tw {
            total += window_ssim(
                &ga,
                &gb,
                w,
                ti * SSIM_WINDOW,
                tj * SSIM_WINDOW,
                SSIM_WINDOW,
                SSIM_WINDOW,
            );
        }
    }
    Ok(total / (th * tw) as f64)
}

fn to_gray(img: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    if c == 1 {
        return img.to_vec();
    }
    let mut gray = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for (g, p) in gray.iter_mut().zip(plane) {
            *g += p;
        }
    }
    for g in &mut gray {
        *g /= c as f64;
    }
    gray
}

fn window_ssim(a: &[f64], b: &[f64], stride: usize, i0: usize, j0: usize, wh: usize, ww: usize) -> f64 {
    let n = (wh * ww) as f64;
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in i0..i0 + wh {
        for j in j0..j0 + ww {
            let x = a[i * stride + j];
            let y = b[i * stride + j];
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
    }
    let ma = sa / n;
    let mb = sb / n;
    let va = saa / n - ma * ma;
    let vb = sbb / n - mb * mb;
    let cov = sab / n - ma * mb;
    ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2))
}

pub fn quality(a: &[f64], b: &[f64], shape: [usize; 3]) -> Result<QualityReport> {
    let m = mse(a, b)?;
    Ok(QualityReport {
        mse: m,
        psnr: psnr(m),
        ssim: ssim(a, b, shape)?,
    })
}
