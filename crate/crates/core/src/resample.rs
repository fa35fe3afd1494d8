//! Separable linear image operators expressed as `[n_out, n_in]` matrices.
//!
//! Applying a pair `(mh, mw)` to `[.., H, W]` computes `mh · X · mwᵀ`, which is
//! differentiable through the matmul ops.

use raeg_autograd::{Float, Tape, Tensor, Var};

/// Bilinear interpolation from `n_in` to `n_out` samples with half-pixel centres.
pub fn bilinear_matrix<T: Float>(n_in: usize, n_out: usize) -> Tensor<T> {
    assert!(n_in > 0 && n_out > 0, "bilinear_matrix of empty axis");
    let mut m = vec![T::zero(); n_out * n_in];
    let scale = n_in as f64 / n_out as f64;
    for i in 0..n_out {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        let f = src - i0 as f64;
        m[i * n_in + i0] += T::of_f64(1.0 - f);
        m[i * n_in + i1] += T::of_f64(f);
    }
    Tensor::from_vec(vec![n_out, n_in], m).expect("bilinear shape")
}

/// Downsample `n` to `round(n · factor)` and back, as one `[n, n]` matrix.
pub fn rescale_matrix<T: Float>(n: usize, factor: f64) -> Tensor<T> {
    let small = ((n as f64 * factor).round() as usize).clamp(1, n);
    bilinear_matrix::<T>(small, n).matmul(&bilinear_matrix(n, small))
}

/// Keep `[start, start + len)` and stretch it back to `n` samples.
pub fn crop_resize_matrix<T: Float>(n: usize, start: usize, len: usize) -> Tensor<T> {
    assert!(len > 0 && start + len <= n, "crop window out of range");
    let up = bilinear_matrix::<T>(len, n);
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..len {
            m[i * n + start + j] = up.data()[i * len + j];
        }
    }
    Tensor::from_vec(vec![n, n], m).expect("crop shape")
}

/// Normalized 1-D Gaussian taps of odd length `kernel`.
pub fn gaussian_taps(kernel: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel / 2) as f64;
    let raw: Vec<f64> = (0..kernel)
        .map(|i| {
            let d = i as f64 - r;
            if sigma > 0.0 {
                (-0.5 * d * d / (sigma * sigma)).exp()
            } else if d == 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Gaussian blur with replicated borders; every row sums to 1.
pub fn blur_matrix<T: Float>(n: usize, kernel: usize, sigma: f64) -> Tensor<T> {
    let taps = gaussian_taps(kernel, sigma);
    let r = (kernel / 2) as isize;
    let mut m = vec![T::zero(); n * n];
    for i in 0..n {
        for (t, &w) in taps.iter().enumerate() {
            let j = (i as isize + t as isize - r).clamp(0, n as isize - 1) as usize;
            m[i * n + j] += T::of_f64(w);
        }
    }
    Tensor::from_vec(vec![n, n], m).expect("blur shape")
}

/// `mh · X · mwᵀ` over the two trailing axes.
pub fn separable<'t, T: Float>(x: Var<'t, T>, mh: &Tensor<T>, mw: &Tensor<T>) -> Var<'t, T> {
    let tape = x.tape();
    x.matmul_left(tape.constant(mh.clone())).matmul_last(tape.constant(mw.transpose2d()))
}

pub fn separable_tensor<T: Float>(x: &Tensor<T>, mh: &Tensor<T>, mw: &Tensor<T>) -> Tensor<T> {
    let tape = Tape::new();
    separable(tape.constant(x.clone()), mh, mw).value()
}
