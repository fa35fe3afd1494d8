//! Real (non-differentiable) attacks used at evaluation time.

use std::io::Cursor;
use std::path::Path;
use std::process::Command;

use image::codecs::jpeg::JpegEncoder;
use image::imageops::{self, FilterType};
use image::{ImageFormat, RgbImage};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raeg_autograd::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{RaegError, Result};
use crate::generator::quantize;
use crate::imageio::{batch_to_images, from_rgb8, read_rgb, write_png};

/// An external command mapping an input image directory to an output directory.
/// `{in}` and `{out}` in `args` are replaced by the two paths.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalDefense {
    pub name: String,
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BatteryConfig {
    pub jpeg_qualities: Vec<u8>,
    pub resize_factor: f64,
    pub noise_sigma: f64,
    pub median_size: usize,
    pub seed: u64,
    pub external: Vec<ExternalDefense>,
}

impl Default for BatteryConfig {
    fn default() -> Self {
        Self { jpeg_qualities: vec![90, 50], resize_factor: 0.5, noise_sigma: 0.02, median_size: 3, seed: 0, external: Vec::new() }
    }
}

pub const NO_ATTACK: &str = "none";

/// Attacked copies of one batch, in column order, plus any skipped entries.
#[derive(Clone, Debug)]
pub struct BatteryOutput<T: Float> {
    pub entries: Vec<(String, Tensor<T>)>,
    pub warnings: Vec<String>,
}

pub fn jpeg_codec(img: &RgbImage, quality: u8) -> Result<RgbImage> {
    let mut buf = Vec::new();
    JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(img)
        .map_err(|source| RaegError::Image { path: "<jpeg encode>".into(), source })?;
    Ok(image::load(Cursor::new(buf), ImageFormat::Jpeg)
        .map_err(|source| RaegError::Image { path: "<jpeg decode>".into(), source })?
        .to_rgb8())
}

/// Bilinear down by `factor`, then back up to the original size.
pub fn resize_roundtrip(img: &RgbImage, factor: f64) -> RgbImage {
    let (w, h) = img.dimensions();
    let sw = ((w as f64 * factor).round() as u32).max(1);
    let sh = ((h as f64 * factor).round() as u32).max(1);
    let small = imageops::resize(img, sw, sh, FilterType::Triangle);
    imageops::resize(&small, w, h, FilterType::Triangle)
}

/// `size × size` median filter with replicated borders.
pub fn median_filter(img: &RgbImage, size: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let r = (size / 2) as i64;
    let mut window = Vec::with_capacity(size * size);
    RgbImage::from_fn(w, h, |x, y| {
        let mut px = [0u8; 3];
        for (ch, out) in px.iter_mut().enumerate() {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let sx = (x as i64 + dx).clamp(0, w as i64 - 1) as u32;
                    let sy = (y as i64 + dy).clamp(0, h as i64 - 1) as u32;
                    window.push(img.get_pixel(sx, sy).0[ch]);
                }
            }
            window.sort_unstable();
            *out = window[window.len() / 2];
        }
        image::Rgb(px)
    })
}

/// Additive Gaussian noise followed by 8-bit clamping.
pub fn gaussian_noise<T: Float>(x: &Tensor<T>, sigma: f64, seed: u64) -> Tensor<T> {
    let noise = Tensor::<T>::randn(x.shape().to_vec(), sigma, &mut ChaCha8Rng::seed_from_u64(seed));
    quantize(&x.zip_map(&noise, |a, b| a + b))
}

fn per_image<T: Float>(x: &Tensor<T>, f: impl Fn(&RgbImage) -> Result<RgbImage>) -> Result<Tensor<T>> {
    let out = batch_to_images(x)?.iter().map(f).collect::<Result<Vec<_>>>()?;
    from_rgb8(&out)
}

pub fn run_external<T: Float>(defense: &ExternalDefense, x: &Tensor<T>) -> Result<Tensor<T>> {
    let fail = |reason: String| RaegError::ExternalDefense { name: defense.name.clone(), reason };
    let dir = tempfile::tempdir()?;
    let (input, output) = (dir.path().join("in"), dir.path().join("out"));
    std::fs::create_dir_all(&output)?;
    let images = batch_to_images(x)?;
    for (i, img) in images.iter().enumerate() {
        write_png(img, &input.join(format!("{i:05}.png")))?;
    }
    let subst = |a: &String| a.replace("{in}", &input.to_string_lossy()).replace("{out}", &output.to_string_lossy());
    let status = Command::new(&defense.program)
        .args(defense.args.iter().map(subst))
        .status()
        .map_err(|e| fail(format!("cannot run `{}`: {e}", defense.program)))?;
    if !status.success() {
        return Err(fail(format!("exited with {status}")));
    }
    let back = (0..images.len())
        .map(|i| read_from(&output, i).map_err(|e| fail(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    from_rgb8(&back)
}

fn read_from(dir: &Path, i: usize) -> Result<RgbImage> {
    read_rgb(&dir.join(format!("{i:05}.png")))
}

/// Apply every battery entry to an 8-bit representable batch.
pub fn real_attack_battery<T: Float>(x: &Tensor<T>, cfg: &BatteryConfig) -> Result<BatteryOutput<T>> {
    let mut entries = vec![(NO_ATTACK.to_string(), x.clone())];
    let mut warnings = Vec::new();
    for &q in &cfg.jpeg_qualities {
        let name = format!("jpeg{q}");
        match per_image(x, |img| jpeg_codec(img, q)) {
            Ok(t) => entries.push((name, t)),
            Err(e) => warnings.push(format!("{name} skipped: {e}")),
        }
    }
    entries.push(("resize".into(), per_image(x, |img| Ok(resize_roundtrip(img, cfg.resize_factor)))?));
    entries.push(("noise".into(), gaussian_noise(x, cfg.noise_sigma, cfg.seed)));
    entries.push(("median".into(), per_image(x, |img| Ok(median_filter(img, cfg.median_size)))?));
    for d in &cfg.external {
        match run_external(d, x) {
            Ok(t) => entries.push((d.name.clone(), t)),
            Err(e) => warnings.push(format!("{} skipped: {e}", d.name)),
        }
    }
    Ok(BatteryOutput { entries, warnings })
}
