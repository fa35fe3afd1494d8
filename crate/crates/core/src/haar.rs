//! Single-level orthonormal 2-D Haar analysis and synthesis.
//!
//! For each 2×2 block `(a b / c d)` of every channel:
//! `LL = (a+b+c+d)/2`, `LH = (a+b−c−d)/2`, `HL = (a−b+c−d)/2`, `HH = (a−b−c+d)/2`.
//! Output channels are grouped by subband: all `LL` channels first, then
//! `LH`, `HL` and `HH`, so `[B, C, H, W]` becomes `[B, 4C, H/2, W/2]`.
//!
//! The transform matrix is orthogonal and symmetric up to block layout, so
//! the gradient of the forward transform is the inverse transform of the
//! upstream gradient and vice versa.

use raeg_autograd::{Float, Tensor, Var};

use crate::error::{RaegError, Result};

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(RaegError::shape(format!("{what} expects [B, C, H, W], got {shape:?}"))),
    }
}

fn analysis<T: Float>(x: &[T], b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let half = T::of_f64(0.5);
    let plane = oh * ow;
    let mut out = vec![T::zero(); b * 4 * c * plane];
    for bi in 0..b {
        for ci in 0..c {
            let src = &x[(bi * c + ci) * h * w..][..h * w];
            let band = |k: usize| ((bi * 4 + k) * c + ci) * plane;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..oh {
                for j in 0..ow {
                    let p = (2 * i) * w + 2 * j;
                    let (a, bb, cc, d) = (src[p], src[p + 1], src[p + w], src[p + w + 1]);
                    let o = i * ow + j;
                    out[ll + o] = (a + bb + cc + d) * half;
                    out[lh + o] = (a + bb - cc - d) * half;
                    out[hl + o] = (a - bb + cc - d) * half;
                    out[hh + o] = (a - bb - cc + d) * half;
                }
            }
        }
    }
    out
}

fn synthesis<T: Float>(s: &[T], b: usize, c4: usize, oh: usize, ow: usize) -> Vec<T> {
    let c = c4 / 4;
    let (h, w) = (2 * oh, 2 * ow);
    let half = T::of_f64(0.5);
    let plane = oh * ow;
    let mut out = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let dst = &mut out[(bi * c + ci) * h * w..][..h * w];
            let band = |k: usize| ((bi * 4 + k) * c + ci) * plane;
            let (ll, lh, hl, hh) = (band(0), band(1), band(2), band(3));
            for i in 0..oh {
                for j in 0..ow {
                    let o = i * ow + j;
                    let (v_ll, v_lh, v_hl, v_hh) = (s[ll + o], s[lh + o], s[hl + o], s[hh + o]);
                    let p = (2 * i) * w + 2 * j;
                    dst[p] = (v_ll + v_lh + v_hl + v_hh) * half;
                    dst[p + 1] = (v_ll + v_lh - v_hl - v_hh) * half;
                    dst[p + w] = (v_ll - v_lh + v_hl - v_hh) * half;
                    dst[p + w + 1] = (v_ll - v_lh - v_hl + v_hh) * half;
                }
            }
        }
    }
    out
}

/// `[B, C, H, W] -> [B, 4C, H/2, W/2]`; `H` and `W` must be even.
pub fn forward_tensor<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = dims4(x.shape(), "haar forward")?;
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(RaegError::shape(format!("haar forward needs even, nonzero spatial dims, got {h}×{w}")));
    }
    Ok(Tensor::from_vec(vec![b, 4 * c, h / 2, w / 2], analysis(x.data(), b, c, h, w))?)
}

/// `[B, 4C, H', W'] -> [B, C, 2H', 2W']`; exact inverse of [`forward_tensor`].
pub fn inverse_tensor<T: Float>(s: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c4, oh, ow) = dims4(s.shape(), "haar inverse")?;
    if c4 % 4 != 0 || c4 == 0 {
        return Err(RaegError::shape(format!("haar inverse needs a channel count divisible by 4, got {c4}")));
    }
    Ok(Tensor::from_vec(vec![b, c4 / 4, 2 * oh, 2 * ow], synthesis(s.data(), b, c4, oh, ow))?)
}

/// Differentiable [`forward_tensor`].
pub fn forward<'t, T: Float>(x: Var<'t, T>) -> Result<Var<'t, T>> {
    let out = forward_tensor(&x.value())?;
    Ok(x.tape().push(out, &[x], |g, _| vec![Some(inverse_tensor(g).expect("haar grad shape"))]))
}

/// Differentiable [`inverse_tensor`].
pub fn inverse<'t, T: Float>(s: Var<'t, T>) -> Result<Var<'t, T>> {
    let out = inverse_tensor(&s.value())?;
    Ok(s.tape().push(out, &[s], |g, _| vec![Some(forward_tensor(g).expect("haar grad shape"))]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use raeg_autograd::gradcheck::check_sampled;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Orthonormal 4×4 Haar matrix acting on (a, b, c, d).
    const HAAR: [[f64; 4]; 4] = [
        [0.5, 0.5, 0.5, 0.5],
        [0.5, 0.5, -0.5, -0.5],
        [0.5, -0.5, 0.5, -0.5],
        [0.5, -0.5, -0.5, 0.5],
    ];

    fn matrix_oracle(block: [f64; 4]) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (r, row) in HAAR.iter().enumerate() {
            out[r] = row.iter().zip(block).map(|(m, v)| m * v).sum();
        }
        out
    }

    #[test]
    fn known_block() {
        let oracle = matrix_oracle([1.0, 2.0, 3.0, 4.0]);
        assert_eq!(oracle, [5.0, -2.0, -1.0, 0.0]);
        let x = Tensor::<f64>::from_vec(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let s = forward_tensor(&x).unwrap();
        assert_eq!(s.shape(), &[1, 4, 1, 1]);
        assert_eq!(s.data(), &oracle);
    }

    #[test]
    fn known_block_inverse() {
        // transpose of the matrix oracle
        let coeffs = [5.0, -2.0, -1.0, 0.0];
        let mut block = [0.0; 4];
        for (j, slot) in block.iter_mut().enumerate() {
            *slot = (0..4).map(|r| HAAR[r][j] * coeffs[r]).sum();
        }
        assert_eq!(block, [1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::<f64>::from_vec(vec![1, 4, 1, 1], coeffs.to_vec()).unwrap();
        assert_eq!(inverse_tensor(&s).unwrap().data(), &block);
    }

    #[test]
    fn constant_image_has_no_detail() {
        let x = Tensor::<f32>::full(vec![2, 3, 4, 6], 0.3);
        let s = forward_tensor(&x).unwrap();
        let ll = s.narrow(1, 0, 3);
        let detail = s.narrow(1, 3, 9);
        assert!(ll.data().iter().all(|&v| (v - 0.6).abs() < 1e-7));
        assert!(detail.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_layout_is_subband_major() {
        // channel 1 constant 1, channel 0 zero: LL of channel 1 lands at index 1
        let mut data = vec![0.0f64; 2 * 4];
        data[4..].fill(1.0);
        let x = Tensor::from_vec(vec![1, 2, 2, 2], data).unwrap();
        let s = forward_tensor(&x).unwrap();
        assert_eq!(s.data(), &[0.0, 2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn zero_roundtrip_and_errors() {
        let z = Tensor::<f32>::zeros(vec![1, 8, 3, 3]);
        assert_eq!(inverse_tensor(&z).unwrap(), Tensor::zeros(vec![1, 2, 6, 6]));
        assert!(matches!(forward_tensor(&Tensor::<f32>::zeros(vec![1, 1, 3, 4])), Err(RaegError::Shape(_))));
        assert!(matches!(inverse_tensor(&Tensor::<f32>::zeros(vec![1, 6, 2, 2])), Err(RaegError::Shape(_))));
        assert!(forward_tensor(&Tensor::<f32>::zeros(vec![4, 4])).is_err());
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 6], 1.0, &mut rng);
        let weights = Tensor::<f64>::randn(vec![2, 12, 2, 3], 1.0, &mut rng);
        let report = check_sampled(&[x], 1e-6, 40, &mut rng, |tape, v| {
            forward(v[0]).unwrap().mul(tape.constant(weights.clone())).sum()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
        let s = Tensor::<f64>::randn(vec![1, 8, 3, 2], 1.0, &mut rng);
        let w2 = Tensor::<f64>::randn(vec![1, 2, 6, 4], 1.0, &mut rng);
        let report = check_sampled(&[s], 1e-6, 40, &mut rng, |tape, v| {
            inverse(v[0]).unwrap().mul(tape.constant(w2.clone())).sqr().sum()
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    fn image_strategy() -> impl Strategy<Value = Tensor<f32>> {
        (1usize..3, 1usize..4, 1usize..5, 1usize..5, any::<u64>()).prop_map(|(b, c, h, w, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Tensor::randn(vec![b, c, 2 * h, 2 * w], 1.0, &mut rng)
        })
    }

    proptest! {
        #[test]
        fn perfect_reconstruction(x in image_strategy()) {
            let back = inverse_tensor(&forward_tensor(&x).unwrap()).unwrap();
            prop_assert!(back.zip_map(&x, |a, b| a - b).max_abs() < 1e-6);
        }

        #[test]
        fn energy_is_preserved(x in image_strategy()) {
            let s = forward_tensor(&x.cast::<f64>()).unwrap();
            let (e_in, e_out) = (x.cast::<f64>().sum_squares(), s.sum_squares());
            prop_assert!((e_in - e_out).abs() <= 1e-5 * e_in.max(1e-12));
            let s32 = forward_tensor(&x).unwrap();
            let rel = (s32.sum_squares() as f64 - e_in).abs() / e_in.max(1e-12);
            prop_assert!(rel < 1e-5);
        }

        #[test]
        fn synthesis_then_analysis_is_identity(x in image_strategy()) {
            let s = forward_tensor(&x).unwrap();
            let again = forward_tensor(&inverse_tensor(&s).unwrap()).unwrap();
            prop_assert!(again.zip_map(&s, |a, b| a - b).max_abs() < 1e-6);
        }

        #[test]
        fn linearity(x in image_strategy(), a in -2.0f64..2.0, b in -2.0f64..2.0) {
            let x = x.cast::<f64>();
            let y = x.map(|v| (v * 1.7).sin());
            let lhs = forward_tensor(&x.zip_map(&y, |p, q| a * p + b * q)).unwrap();
            let rhs = forward_tensor(&x).unwrap().zip_map(&forward_tensor(&y).unwrap(), |p, q| a * p + b * q);
            prop_assert!(lhs.zip_map(&rhs, |p, q| p - q).max_abs() < 1e-12);
        }
    }
}
