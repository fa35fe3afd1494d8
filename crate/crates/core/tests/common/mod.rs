//! Probe images shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

use raeg::generator::quantize;
use raeg_autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// PSNR and SSIM of [`probe_pair`] frozen from scikit-image 0.25
/// (`structural_similarity(..., gaussian_weights=True, sigma=1.5,
/// use_sample_covariance=False, data_range=1.0, channel_axis=0)`).
pub const REFERENCE: [(f64, f64); 10] = [
    (43.011143424919595, 0.9995581876756576),
    (36.99063394532796, 0.998528772523566),
    (33.46362361935056, 0.9970305422259463),
    (30.980652259590435, 0.9949876522547113),
    (29.029549461489545, 0.9922751422341755),
    (27.445893276535465, 0.9888807805952132),
    (26.108325991852553, 0.985001288770169),
    (24.952770893811497, 0.9805043281159279),
    (23.92674513343335, 0.9754275607717972),
    (23.0071559392018, 0.9697133492670025),
];

pub fn probe_pair(k: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (c, h, w) = (3, 24, 20);
    let kf = k as f64;
    let value = |i: usize| {
        let (ch, y, x) = ((i / (h * w)) as f64, ((i / w) % h) as f64, (i % w) as f64);
        let a = 0.5 + 0.4 * (0.3 * x * (kf + 1.0) + 0.7 * y + ch).sin();
        let b = (a + 0.1 * (kf + 1.0) / 10.0 * (1.7 * x + 2.3 * y * (kf + 1.0) + 0.5 * ch).sin()).clamp(0.0, 1.0);
        (a, b)
    };
    let a = Tensor::from_fn(vec![1, c, h, w], |i| value(i).0);
    let b = Tensor::from_fn(vec![1, c, h, w], |i| value(i).1);
    (a, b)
}

/// Smooth random textures on the 8-bit grid, loosely photo-like.
pub fn photos(n: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * 3 * size * size);
    for _ in 0..n {
        let waves: Vec<[f64; 4]> = (0..4)
            .map(|_| [rng.random_range(0.05..0.6), rng.random_range(0.05..0.6), rng.random_range(0.0..6.3), rng.random_range(0.05..0.2)])
            .collect();
        for c in 0..3 {
            let base = rng.random_range(0.25..0.75);
            for y in 0..size {
                for x in 0..size {
                    let v: f64 = waves
                        .iter()
                        .map(|&[fx, fy, ph, a]| a * (fx * x as f64 + fy * y as f64 + ph + c as f64).sin())
                        .sum();
                    data.push(base + v + rng.random_range(-0.03..0.03));
                }
            }
        }
    }
    quantize(&Tensor::from_vec(vec![n, 3, size, size], data).unwrap())
}

