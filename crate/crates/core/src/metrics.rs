//! Image quality metrics on `[B, C, H, W]` batches with data range 1.

use raeg_autograd::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{RaegError, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RaegError::shape(format!("metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(RaegError::shape("metric inputs are empty"));
    }
    Ok(())
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR over all elements; `+∞` for identical inputs.
pub fn psnr<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    check_pair(a, b)?;
    let se: f64 = a.data().iter().zip(b.data()).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
    Ok(psnr_from_mse(se / a.len() as f64))
}

/// PSNR of each image in the batch.
pub fn psnr_per_image<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let n = a.dim(0);
    let per = a.len() / n;
    Ok((0..n)
        .map(|i| {
            let r = i * per..(i + 1) * per;
            let se: f64 =
                a.data()[r.clone()].iter().zip(&b.data()[r]).map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2)).sum();
            psnr_from_mse(se / per as f64)
        })
        .collect())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable Gaussian filter keeping only fully covered positions.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x0 in 0..ow {
            rows[y * ow + x0] = (0..SSIM_WINDOW).map(|t| k[t] * x[y * w + x0 + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y0 in 0..oh {
        for x0 in 0..ow {
            out[y0 * ow + x0] = (0..SSIM_WINDOW).map(|t| k[t] * rows[(y0 + t) * ow + x0]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let k = gaussian_window();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(|x, y| x * y), h, w, &k);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mu_a.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    total / n as f64
}

/// SSIM of each image, averaged over channels.
///
/// Gaussian window 11×11 with σ = 1.5, population covariances, and the
/// mean taken over window positions that lie fully inside the image.
pub fn ssim_per_image<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Vec<f64>> {
    check_pair(a, b)?;
    let &[n, c, h, w] = a.shape() else {
        return Err(RaegError::shape(format!("ssim expects [B, C, H, W], got {:?}", a.shape())));
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(RaegError::shape(format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} images, got {h}×{w}")));
    }
    let plane = h * w;
    let to64 = |t: &Tensor<T>, o: usize| -> Vec<f64> { t.data()[o..o + plane].iter().map(|v| v.as_f64()).collect() };
    Ok((0..n)
        .map(|i| {
            (0..c).map(|ch| {
                let o = (i * c + ch) * plane;
                ssim_plane(&to64(a, o), &to64(b, o), h, w)
            })
            .sum::<f64>()
                / c as f64
        })
        .collect())
}

/// Mean [`ssim_per_image`] over the batch.
pub fn ssim<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let v = ssim_per_image(a, b)?;
    Ok(v.iter().sum::<f64>() / v.len() as f64)
}

/// Mean and standard deviation of a sample; infinite values are counted and excluded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    #[serde(with = "extended_float")]
    pub mean: f64,
    #[serde(with = "extended_float")]
    pub std: f64,
    pub count: usize,
    pub infinite: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
        let infinite = values.len() - finite.len();
        if finite.is_empty() {
            // all identical: report the sentinel itself
            let mean = if infinite > 0 { f64::INFINITY } else { 0.0 };
            return Self { mean, std: 0.0, count: 0, infinite };
        }
        let n = finite.len() as f64;
        let mean = finite.iter().sum::<f64>() / n;
        let var = finite.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self { mean, std: var.sqrt(), count: finite.len(), infinite }
    }
}

/// JSON-safe `f64`: non-finite values are written as the strings `"inf"`, `"-inf"` and `"nan"`.
pub mod extended_float {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        match *v {
            v if v.is_finite() => Repr::Number(v),
            v if v.is_nan() => Repr::Text("nan".into()),
            v if v > 0.0 => Repr::Text("inf".into()),
            _ => Repr::Text("-inf".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(serde::de::Error::custom(format!("not a number: `{other}`"))),
            },
        }
    }
}
