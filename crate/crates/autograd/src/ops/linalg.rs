use crate::{Float, Tensor, Var};

impl<'t, T: Float> Var<'t, T> {
    /// Matrix product of `[M, K]` and `[K, N]`.
    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let out = a.matmul(&b);
        let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
        self.tape.push(out, &[self, rhs], move |g, mask| {
            let da = mask[0].then(|| {
                let mut da = vec![T::zero(); m * k];
                T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), b.data(), (1, n as isize), T::zero(), &mut da, (k as isize, 1));
                Tensor::from_vec(vec![m, k], da).expect("matmul da")
            });
            let db = mask[1].then(|| {
                let mut db = vec![T::zero(); k * n];
                T::gemm(k, m, n, T::one(), a.data(), (1, k as isize), g.data(), (n as isize, 1), T::zero(), &mut db, (n as isize, 1));
                Tensor::from_vec(vec![k, n], db).expect("matmul db")
            });
            vec![da, db]
        })
    }

    /// Multiplies the last axis by `m`: `[..., K] · [K, N] -> [..., N]`.
    pub fn matmul_last(self, m: Var<'t, T>) -> Var<'t, T> {
        let shape = self.shape();
        let k = *shape.last().expect("matmul_last on rank 0");
        let rows = self.value().len() / k.max(1);
        let n = m.dim(1);
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = n;
        self.reshape(vec![rows, k]).matmul(m).reshape(out_shape)
    }

    /// Left-multiplies every trailing matrix: `[M, K] · [..., K, L] -> [..., M, L]`.
    pub fn matmul_left(self, m: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let a = m.value();
        let rank = x.rank();
        assert!(rank >= 2, "matmul_left needs a matrix operand");
        let (k, l) = (x.dim(rank - 2), x.dim(rank - 1));
        let (mm, k2) = (a.dim(0), a.dim(1));
        assert_eq!(k, k2, "matmul_left inner dimension mismatch");
        let batch = x.len() / (k * l).max(1);
        let mut out = vec![T::zero(); batch * mm * l];
        for bi in 0..batch {
            T::gemm(mm, k, l, T::one(), a.data(), (k as isize, 1), &x.data()[bi * k * l..], (l as isize, 1), T::zero(), &mut out[bi * mm * l..], (l as isize, 1));
        }
        let mut out_shape = x.shape().to_vec();
        out_shape[rank - 2] = mm;
        let out = Tensor::from_vec(out_shape, out).expect("matmul_left out");
        self.tape.push(out, &[self, m], move |g, mask| {
            let gd = g.data();
            let dx = mask[0].then(|| {
                let mut dx = vec![T::zero(); x.len()];
                for bi in 0..batch {
                    T::gemm(k, mm, l, T::one(), a.data(), (1, k as isize), &gd[bi * mm * l..], (l as isize, 1), T::zero(), &mut dx[bi * k * l..], (l as isize, 1));
                }
                Tensor::from_vec(x.shape().to_vec(), dx).expect("matmul_left dx")
            });
            let da = mask[1].then(|| {
                let mut da = vec![T::zero(); mm * k];
                for bi in 0..batch {
                    T::gemm(mm, l, k, T::one(), &gd[bi * mm * l..], (l as isize, 1), &x.data()[bi * k * l..], (1, l as isize), T::one(), &mut da, (k as isize, 1));
                }
                Tensor::from_vec(vec![mm, k], da).expect("matmul_left da")
            });
            vec![dx, da]
        })
    }

    pub fn transpose2d(self) -> Var<'t, T> {
        self.permute(&[1, 0])
    }
}
