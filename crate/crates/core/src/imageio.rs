//! Conversion between `[B, 3, H, W]` tensors and 8-bit RGB images.

use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use raeg_autograd::{Float, Tensor};

use crate::error::{RaegError, Result};

fn to_byte<T: Float>(v: T) -> u8 {
    (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Image `index` of the batch as 8-bit RGB (clipped and rounded).
pub fn to_rgb8<T: Float>(batch: &Tensor<T>, index: usize) -> Result<RgbImage> {
    let &[_, c, h, w] = batch.shape() else {
        return Err(RaegError::shape(format!("expected [B, 3, H, W], got {:?}", batch.shape())));
    };
    if c != 3 {
        return Err(RaegError::shape(format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let d = &batch.data()[index * 3 * plane..(index + 1) * 3 * plane];
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let p = y as usize * w + x as usize;
        Rgb([to_byte(d[p]), to_byte(d[plane + p]), to_byte(d[2 * plane + p])])
    }))
}

/// Stack equally sized images into a batch with values `k / 255`.
pub fn from_rgb8<T: Float>(images: &[RgbImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| RaegError::shape("empty image list"))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = Vec::with_capacity(images.len() * 3 * plane);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(RaegError::shape(format!("image sizes differ: {:?} vs {:?}", img.dimensions(), (w, h))));
        }
        for ch in 0..3 {
            data.extend(img.pixels().map(|p| T::of_f64(p.0[ch] as f64 / 255.0)));
        }
    }
    Ok(Tensor::from_vec(vec![images.len(), 3, h as usize, w as usize], data)?)
}

pub fn batch_to_images<T: Float>(batch: &Tensor<T>) -> Result<Vec<RgbImage>> {
    (0..batch.dim(0)).map(|i| to_rgb8(batch, i)).collect()
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path).map_err(|source| RaegError::Image { path: path.to_path_buf(), source })?.to_rgb8())
}

/// Lossless PNG.
pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| RaegError::Image { path: path.to_path_buf(), source })
}
