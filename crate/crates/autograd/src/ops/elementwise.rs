use crate::tensor::strides;
use crate::{Float, Tensor, Var};

/// Maps every output index of a broadcast binary op to its rhs index.
///
/// The rhs is aligned to the trailing dimensions of the lhs; each rhs
/// dimension must equal the lhs dimension or be 1.
#[derive(Clone)]
struct Broadcast {
    out_shape: Vec<usize>,
    rhs_len: usize,
    // rhs stride per output axis, 0 where broadcast
    rhs_strides: Vec<usize>,
    kind: BroadcastKind,
}

#[derive(Clone, Copy, PartialEq)]
enum BroadcastKind {
    Same,
    Scalar,
    General,
}

impl Broadcast {
    fn new(lhs: &[usize], rhs: &[usize]) -> Self {
        assert!(rhs.len() <= lhs.len(), "cannot broadcast {rhs:?} onto {lhs:?}");
        let rhs_len: usize = rhs.iter().product();
        let offset = lhs.len() - rhs.len();
        let rs = strides(rhs);
        let mut rhs_strides = vec![0usize; lhs.len()];
        for (i, (&d, &s)) in rhs.iter().zip(&rs).enumerate() {
            let l = lhs[offset + i];
            assert!(d == l || d == 1, "cannot broadcast {rhs:?} onto {lhs:?}");
            rhs_strides[offset + i] = if d == 1 { 0 } else { s };
        }
        let kind = if rhs_len == 1 {
            BroadcastKind::Scalar
        } else if lhs[offset..] == *rhs && offset == 0 {
            BroadcastKind::Same
        } else {
            BroadcastKind::General
        };
        Self { out_shape: lhs.to_vec(), rhs_len, rhs_strides, kind }
    }

    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let n: usize = self.out_shape.iter().product();
        match self.kind {
            BroadcastKind::Same => (0..n).for_each(|i| f(i, i)),
            BroadcastKind::Scalar => (0..n).for_each(|i| f(i, 0)),
            BroadcastKind::General => {
                let rank = self.out_shape.len();
                // Collapse the innermost run so the hot loop is a plain stride walk.
                let inner = self.out_shape[rank - 1];
                let inner_stride = self.rhs_strides[rank - 1];
                let outer = n / inner.max(1);
                let mut idx = vec![0usize; rank.saturating_sub(1)];
                let mut base = 0usize;
                for o in 0..outer {
                    for j in 0..inner {
                        f(o * inner + j, base + j * inner_stride);
                    }
                    for ax in (0..rank - 1).rev() {
                        idx[ax] += 1;
                        base += self.rhs_strides[ax];
                        if idx[ax] < self.out_shape[ax] {
                            break;
                        }
                        base -= self.rhs_strides[ax] * idx[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }

    fn apply<T: Float>(&self, a: &Tensor<T>, b: &Tensor<T>, op: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![T::zero(); ad.len()];
        self.for_each(|i, j| out[i] = op(ad[i], bd[j]));
        Tensor::from_vec(self.out_shape.clone(), out).expect("broadcast output shape")
    }

    /// Sum an output-shaped tensor down to the rhs shape.
    fn reduce<T: Float>(&self, g: &[T], rhs_shape: &[usize]) -> Tensor<T> {
        let mut out = vec![T::zero(); self.rhs_len];
        self.for_each(|i, j| out[j] += g[i]);
        Tensor::from_vec(rhs_shape.to_vec(), out).expect("broadcast reduce shape")
    }
}

impl<'t, T: Float> Var<'t, T> {
    fn binary(
        self,
        rhs: Var<'t, T>,
        op: impl Fn(T, T) -> T,
        // (a, b, grad) -> (da, db)
        deriv: impl Fn(T, T, T) -> (T, T) + 'static,
    ) -> Var<'t, T> {
        let (a, b) = (self.value(), rhs.value());
        let bc = Broadcast::new(a.shape(), b.shape());
        let out = bc.apply(&a, &b, op);
        let b_shape = b.shape().to_vec();
        self.tape.push(out, &[self, rhs], move |g, mask| {
            let (ad, bd, gd) = (a.data(), b.data(), g.data());
            let mut da = if mask[0] { vec![T::zero(); ad.len()] } else { Vec::new() };
            let mut db = if mask[1] { vec![T::zero(); gd.len()] } else { Vec::new() };
            bc.for_each(|i, j| {
                let (ga, gb) = deriv(ad[i], bd[j], gd[i]);
                if mask[0] {
                    da[i] = ga;
                }
                if mask[1] {
                    db[i] = gb;
                }
            });
            vec![
                mask[0].then(|| Tensor::from_vec(a.shape().to_vec(), da).expect("lhs grad")),
                mask[1].then(|| bc.reduce(&db, &b_shape)),
            ]
        })
    }

    /// Broadcasting add; `rhs` aligns to the trailing dimensions of `self`.
    pub fn add(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary(rhs, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary(rhs, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary(rhs, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn div(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.binary(rhs, |a, b| a / b, |a, b, g| (g / b, -g * a / (b * b)))
    }

    /// Multiply by a constant tensor broadcast like [`Var::mul`].
    pub fn mul_const(self, c: &Tensor<T>) -> Var<'t, T> {
        let c = self.tape.constant(c.clone());
        self.mul(c)
    }

    pub fn add_const(self, c: &Tensor<T>) -> Var<'t, T> {
        let c = self.tape.constant(c.clone());
        self.add(c)
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let y_saved = y.clone();
        self.tape.push(y, &[self], move |g, _| {
            let (xd, yd, gd) = (x.data(), y_saved.data(), g.data());
            let out: Vec<T> = (0..gd.len()).map(|i| gd[i] * df(xd[i], yd[i])).collect();
            vec![Some(Tensor::from_vec(g.shape().to_vec(), out).expect("unary grad"))]
        })
    }

    pub fn neg(self) -> Var<'t, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: f64) -> Var<'t, T> {
        let s = T::of_f64(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t, T> {
        let c = T::of_f64(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'t, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn tanh(self) -> Var<'t, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(self) -> Var<'t, T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| sigmoid(x),
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        self.unary(|x| x.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t, T> {
        let s = T::of_f64(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn abs(self) -> Var<'t, T> {
        self.unary(|x| x.abs(), |x, _| x.signum() * if x == T::zero() { T::zero() } else { T::one() })
    }

    pub fn sqr(self) -> Var<'t, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn cube(self) -> Var<'t, T> {
        let three = T::of_f64(3.0);
        self.unary(|x| x * x * x, move |x, _| three * x * x)
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t, T> {
        let (lo, hi) = (T::of_f64(lo), T::of_f64(hi));
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x >= lo && x <= hi { T::one() } else { T::zero() },
        )
    }

    /// `bound · tanh(x / bound)`: smooth, odd, bounded by `bound`.
    pub fn soft_clamp(self, bound: f64) -> Var<'t, T> {
        let b = T::of_f64(bound);
        self.unary(
            move |x| b * (x / b).tanh(),
            move |x, _| {
                let t = (x / b).tanh();
                T::one() - t * t
            },
        )
    }

    /// Applies `f` to the value and records the result as a constant.
    pub fn map_detached(self, f: impl Fn(T) -> T) -> Var<'t, T> {
        self.tape.constant(self.value().map(f))
    }

    /// Forward value of `f(self)`, gradient of the identity.
    pub fn straight_through(self, f: impl Fn(T) -> T) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        self.tape.push(y, &[self], |g, _| vec![Some(g.clone())])
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
