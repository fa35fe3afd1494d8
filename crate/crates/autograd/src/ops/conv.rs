use crate::{Float, Tensor, Var};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn positions(&self) -> usize {
        self.oh * self.ow
    }

    fn cols_rows(&self) -> usize {
        self.in_c * self.kh * self.kw
    }

    fn cols_len(&self) -> usize {
        self.cols_rows() * self.batch * self.positions()
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn ow_range(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj { (self.pad - kj).div_ceil(self.stride) } else { 0 };
        // iw = ow*stride + kj - pad < w
        let lim = self.w + self.pad;
        let hi = if lim > kj { ((lim - kj - 1) / self.stride + 1).min(self.ow) } else { 0 };
        (lo, hi.max(lo))
    }
}

fn im2col<T: Float>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let bp = g.batch * g.positions();
    let mut cols = vec![T::zero(); g.cols_len()];
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let (lo, hi) = g.ow_range(kj);
                for b in 0..g.batch {
                    let plane = &x[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h || lo >= hi {
                            continue;
                        }
                        let src_row = &plane[ih as usize * g.w..][..g.w];
                        let dst = &mut cols[row * bp + b * g.positions() + oh * g.ow..][..g.ow];
                        if g.stride == 1 {
                            let start = lo + kj - g.pad;
                            dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for ow in lo..hi {
                                dst[ow] = src_row[ow * g.stride + kj - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let bp = g.batch * g.positions();
    let mut x = vec![T::zero(); g.batch * g.in_c * g.h * g.w];
    for c in 0..g.in_c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let (lo, hi) = g.ow_range(kj);
                for b in 0..g.batch {
                    let plane = &mut x[(b * g.in_c + c) * g.h * g.w..][..g.h * g.w];
                    for oh in 0..g.oh {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih as usize >= g.h || lo >= hi {
                            continue;
                        }
                        let dst_row = &mut plane[ih as usize * g.w..][..g.w];
                        let src = &cols[row * bp + b * g.positions() + oh * g.ow..][..g.ow];
                        for ow in lo..hi {
                            dst_row[ow * g.stride + kj - g.pad] += src[ow];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'t, T: Float> Var<'t, T> {
    /// 2-D cross-correlation of `[B, C, H, W]` with `[O, C, KH, KW]` weights and zero padding.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        assert_eq!(x.rank(), 4, "conv2d input must be [B, C, H, W], got {:?}", x.shape());
        assert_eq!(w.rank(), 4, "conv2d weight must be [O, C, KH, KW], got {:?}", w.shape());
        assert!(stride >= 1, "conv2d stride must be positive");
        let (batch, in_c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (out_c, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        assert_eq!(w.dim(1), in_c, "conv2d channel mismatch: input {:?}, weight {:?}", x.shape(), w.shape());
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let g = ConvGeom {
            batch,
            in_c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
        };
        let ck = g.cols_rows();
        let p = g.positions();
        let bp = batch * p;
        let cols = im2col(x.data(), &g);
        let mut out_mat = vec![T::zero(); out_c * bp];
        T::gemm(out_c, ck, bp, T::one(), w.data(), (ck as isize, 1), &cols, (bp as isize, 1), T::zero(), &mut out_mat, (bp as isize, 1));
        drop(cols);
        let out = Tensor::from_vec(vec![out_c, batch, p], out_mat)
            .expect("conv out")
            .permute(&[1, 0, 2])
            .reshape(vec![batch, out_c, g.oh, g.ow]);
        self.tape.push(out, &[self, weight], move |grad, mask| {
            let g_mat = grad.reshape(vec![batch, out_c, p]).permute(&[1, 0, 2]);
            let dx = mask[0].then(|| {
                let mut dcols = vec![T::zero(); g.cols_len()];
                T::gemm(ck, out_c, bp, T::one(), w.data(), (1, ck as isize), g_mat.data(), (bp as isize, 1), T::zero(), &mut dcols, (bp as isize, 1));
                Tensor::from_vec(x.shape().to_vec(), col2im(&dcols, &g)).expect("conv dx")
            });
            let dw = mask[1].then(|| {
                let cols = im2col(x.data(), &g);
                let mut dw = vec![T::zero(); out_c * ck];
                T::gemm(out_c, bp, ck, T::one(), g_mat.data(), (bp as isize, 1), &cols, (1, bp as isize), T::zero(), &mut dw, (ck as isize, 1));
                Tensor::from_vec(w.shape().to_vec(), dw).expect("conv dw")
            });
            vec![dx, dw]
        })
    }

    /// 2×2 max pooling with stride 2 (trailing odd row/column dropped).
    pub fn max_pool2(self) -> Var<'t, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut arg = Vec::with_capacity(b * c * oh * ow);
        let xd = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let cand = base + (2 * i + di) * w + 2 * j + dj;
                        if xd[cand] > xd[best] {
                            best = cand;
                        }
                    }
                    out.push(xd[best]);
                    arg.push(best);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        let out = Tensor::from_vec(vec![b, c, oh, ow], out).expect("maxpool out");
        self.tape.push(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); in_shape.iter().product()];
            for (&i, &gv) in arg.iter().zip(g.data()) {
                dx[i] += gv;
            }
            vec![Some(Tensor::from_vec(in_shape.clone(), dx).expect("maxpool grad"))]
        })
    }

    /// 2×2 average pooling with stride 2.
    pub fn avg_pool2(self) -> Var<'t, T> {
        let x = self.value();
        let (b, c, h, w) = dims4(&x);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::of_f64(0.25);
        let xd = x.data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let r0 = base + 2 * i * w + 2 * j;
                    out.push((xd[r0] + xd[r0 + 1] + xd[r0 + w] + xd[r0 + w + 1]) * quarter);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        let out = Tensor::from_vec(vec![b, c, oh, ow], out).expect("avgpool out");
        self.tape.push(out, &[self], move |g, _| {
            let mut dx = vec![T::zero(); b * c * h * w];
            let gd = g.data();
            for plane in 0..b * c {
                let base = plane * h * w;
                for i in 0..oh {
                    for j in 0..ow {
                        let gv = gd[(plane * oh + i) * ow + j] * quarter;
                        let r0 = base + 2 * i * w + 2 * j;
                        dx[r0] += gv;
                        dx[r0 + 1] += gv;
                        dx[r0 + w] += gv;
                        dx[r0 + w + 1] += gv;
                    }
                }
            }
            vec![Some(Tensor::from_vec(in_shape.clone(), dx).expect("avgpool grad"))]
        })
    }
}

fn dims4<T: Float>(x: &Tensor<T>) -> (usize, usize, usize, usize) {
    assert_eq!(x.rank(), 4, "expected [B, C, H, W], got {:?}", x.shape());
    (x.dim(0), x.dim(1), x.dim(2), x.dim(3))
}

#[cfg(test)]
mod tests {
    use crate::gradcheck::check_gradients;
    use crate::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution.
    fn conv_naive(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, c, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (o, kh, kw) = (w.dim(0), w.dim(2), w.dim(3));
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; b * o * oh * ow];
        for bi in 0..b {
            for oi in 0..o {
                for i in 0..oh {
                    for j in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (i * stride + ki) as isize - pad as isize;
                                    let iw = (j * stride + kj) as isize - pad as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < wd {
                                        acc += x.data()[((bi * c + ci) * h + ih as usize) * wd + iw as usize]
                                            * w.data()[((oi * c + ci) * kh + ki) * kw + kj];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oi) * oh + i) * ow + j] = acc;
                    }
                }
            }
        }
        Tensor::from_vec(vec![b, o, oh, ow], out).unwrap()
    }

    #[test]
    fn conv_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(stride, pad, k, h) in &[(1, 1, 3, 5), (2, 1, 3, 7), (2, 0, 4, 8), (1, 0, 1, 4), (3, 2, 3, 6)] {
            let x = Tensor::<f64>::randn(vec![2, 3, h, h + 1], 1.0, &mut rng);
            let w = Tensor::<f64>::randn(vec![4, 3, k, k], 1.0, &mut rng);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(w.clone()), stride, pad).value();
            let expected = conv_naive(&x, &w, stride, pad);
            assert_eq!(y.shape(), expected.shape());
            let err = y.zip_map(&expected, |a, b| a - b).max_abs();
            assert!(err < 1e-12, "stride {stride} pad {pad}: {err}");
        }
    }

    #[test]
    fn conv_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f64>::randn(vec![2, 2, 5, 6], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
        for &(stride, pad) in &[(1, 1), (2, 1), (2, 0)] {
            let report = check_gradients(&[x.clone(), w.clone()], 1e-6, |_, v| {
                v[0].conv2d(v[1], stride, pad).sqr().sum()
            });
            assert!(report.max_rel_error < 1e-6, "{report:?}");
        }
    }

    #[test]
    fn pooling_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor::<f64>::randn(vec![2, 3, 4, 6], 1.0, &mut rng);
        let report = check_gradients(&[x], 1e-6, |_, v| {
            v[0].max_pool2().sqr().sum().add(v[0].avg_pool2().sqr().sum())
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    proptest::proptest! {
        #[test]
        fn conv_agrees_with_naive_on_random_geometry(
            (b, c, o) in (1usize..3, 1usize..4, 1usize..4),
            (k, stride, pad) in (1usize..4, 1usize..3, 0usize..2),
            (h, w) in (4usize..9, 4usize..9),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(vec![b, c, h, w], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(vec![o, c, k, k], 1.0, &mut rng);
            let tape = Tape::new();
            let y = tape.constant(x.clone()).conv2d(tape.constant(wt.clone()), stride, pad).value();
            let expected = conv_naive(&x, &wt, stride, pad);
            proptest::prop_assert_eq!(y.shape(), expected.shape());
            proptest::prop_assert!(y.zip_map(&expected, |a, b| a - b).max_abs() < 1e-10);
        }

        // <conv(x), g> = <x, conv^T(g)>: the input gradient is the adjoint of the forward map
        #[test]
        fn conv_backward_is_adjoint(
            (k, stride, pad) in (1usize..4, 1usize..3, 0usize..2),
            seed in proptest::prelude::any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor::<f64>::randn(vec![2, 3, 7, 6], 1.0, &mut rng);
            let wt = Tensor::<f64>::randn(vec![2, 3, k, k], 1.0, &mut rng);
            let y = conv_naive(&x, &wt, stride, pad);
            let g = Tensor::<f64>::randn(y.shape().to_vec(), 1.0, &mut rng);
            let tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let out = xv.conv2d(tape.constant(wt.clone()), stride, pad).mul_const(&g).sum();
            let grads = tape.backward(out);
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();
            let lhs = dot(&y, &g);
            let rhs = dot(&x, &grads.get_or_zeros(xv));
            proptest::prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }
}
