//! Double-side affine coupling with spectral-normalized residual subnets.
//!
//! With the input split into channel halves `(x1, x2)`:
//!
//! ```text
//! y1 = x1 ⊙ exp(c(θ1(x2))) + φ1(x2)
//! y2 = x2 ⊙ exp(c(θ2(y1))) + φ2(y1)
//! ```
//!
//! where `c(t) = clamp · tanh(t / clamp)` bounds the log-scale. The inverse
//! undoes the two updates in reverse order with element-wise division.

use rand::Rng;
use raeg_autograd::{Binding, Float, ParamId, ParamStore, Scope, Tensor, Var};

use crate::error::{RaegError, Result};

const SIGMA_FLOOR: f64 = 1e-12;
const LEAKY_SLOPE: f64 = 0.2;

fn normalize<T: Float>(v: &mut [T]) {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt().max(T::of_f64(SIGMA_FLOOR));
    v.iter_mut().for_each(|x| *x /= norm);
}

/// Running estimate of the leading singular vectors of a weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralState<T> {
    pub u: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Float> SpectralState<T> {
    pub fn new<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let mut u = Tensor::<T>::randn(vec![rows], 1.0, rng).into_vec();
        normalize(&mut u);
        Self { u, v: vec![T::zero(); cols] }
    }

    /// One power-iteration step on the `[rows, cols]` matrix `w`.
    pub fn power_step(&mut self, w: &[T]) {
        let (rows, cols) = (self.u.len(), self.v.len());
        debug_assert_eq!(w.len(), rows * cols);
        let mut v = vec![T::zero(); cols];
        for r in 0..rows {
            let ur = self.u[r];
            for (vc, &wv) in v.iter_mut().zip(&w[r * cols..(r + 1) * cols]) {
                *vc += wv * ur;
            }
        }
        normalize(&mut v);
        let mut u: Vec<T> = (0..rows)
            .map(|r| w[r * cols..(r + 1) * cols].iter().zip(&v).map(|(&a, &b)| a * b).sum())
            .collect();
        normalize(&mut u);
        self.u = u;
        self.v = v;
    }

    /// `uᵀ W v`, floored so an all-zero matrix does not divide by zero.
    pub fn sigma(&self, w: &[T]) -> T {
        let cols = self.v.len();
        let s: T = self
            .u
            .iter()
            .enumerate()
            .map(|(r, &ur)| ur * w[r * cols..(r + 1) * cols].iter().zip(&self.v).map(|(&a, &b)| a * b).sum::<T>())
            .sum();
        s.max(T::of_f64(SIGMA_FLOOR))
    }
}

/// `weight / σ̂` for a matrix (or a kernel flattened to `[out, rest]`).
///
/// With `update` the estimate takes one power-iteration step first, as in a
/// training step; without it the stored estimate is used as is.
pub fn spectral_normalize<T: Float>(weight: &Tensor<T>, state: &mut SpectralState<T>, update: bool) -> Result<Tensor<T>> {
    let rows = *weight.shape().first().ok_or_else(|| RaegError::shape("spectral_normalize on a scalar"))?;
    if rows == 0 || weight.len() / rows == 0 {
        return Err(RaegError::shape("spectral_normalize needs at least one row and column"));
    }
    if state.u.len() != rows || state.v.len() != weight.len() / rows {
        return Err(RaegError::shape(format!(
            "spectral state for {}×{} does not match weight {:?}",
            state.u.len(),
            state.v.len(),
            weight.shape()
        )));
    }
    if update {
        state.power_step(weight.data());
    }
    let sigma = state.sigma(weight.data());
    Ok(weight.map(|w| w / sigma))
}

/// Convolution whose kernel is divided by its estimated spectral norm.
#[derive(Clone, Debug)]
pub struct SpectralConv {
    weight: ParamId,
    bias: ParamId,
    u: ParamId,
    v: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl SpectralConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Float, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_c * kernel * kernel;
        let w = Tensor::<T>::randn(vec![out_c, in_c, kernel, kernel], (2.0 / fan_in as f64).sqrt(), rng);
        let mut state = SpectralState::new(out_c, fan_in, rng);
        for _ in 0..20 {
            state.power_step(w.data());
        }
        let weight = scope.param("weight", w);
        let bias = scope.param("bias", Tensor::zeros(vec![out_c, 1, 1]));
        let u = scope.buffer("sn_u", Tensor::from_vec(vec![out_c], state.u).expect("u"));
        let v = scope.buffer("sn_v", Tensor::from_vec(vec![fan_in], state.v).expect("v"));
        Self { weight, bias, u, v, stride, pad }
    }

    pub fn power_iteration<T: Float>(&self, store: &mut ParamStore<T>) {
        let mut state = SpectralState { u: store.get(self.u).to_vec(), v: store.get(self.v).to_vec() };
        state.power_step(store.get(self.weight).data());
        let (u, v) = (state.u, state.v);
        let (nu, nv) = (u.len(), v.len());
        *store.get_mut(self.u) = Tensor::from_vec(vec![nu], u).expect("u");
        *store.get_mut(self.v) = Tensor::from_vec(vec![nv], v).expect("v");
    }

    /// Kernel divided by `σ = uᵀ W v`, differentiable in `W` with `u`, `v` held fixed.
    pub fn normalized_weight<'t, T: Float>(&self, bind: &Binding<'t, '_, T>) -> Var<'t, T> {
        let w = bind.var(self.weight);
        let store = bind.store();
        let (u, v) = (store.get(self.u).data(), store.get(self.v).data());
        let outer = Tensor::from_fn(w.shape(), |i| u[i / v.len()] * v[i % v.len()]);
        let sigma = w.mul_const(&outer).sum().clamp(SIGMA_FLOOR, f64::INFINITY);
        w.div(sigma)
    }

    pub fn forward<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.conv2d(self.normalized_weight(bind), self.stride, self.pad).add(bind.var(self.bias))
    }

    /// Number of tensors registered per conv (weight, bias and two state vectors).
    pub const TENSORS: usize = 4;
}

/// Residual subnet producing a scale or shift map of the same shape as its input.
#[derive(Clone, Debug)]
pub struct Subnet {
    input: SpectralConv,
    blocks: Vec<(SpectralConv, SpectralConv)>,
    output: SpectralConv,
    gain: ParamId,
}

impl Subnet {
    pub const RESIDUAL_BLOCKS: usize = 2;

    pub fn new<T: Float, R: Rng + ?Sized>(scope: &mut Scope<'_, T>, channels: usize, width: usize, rng: &mut R) -> Self {
        let input = SpectralConv::new(&mut scope.sub("in"), channels, width, 3, 1, 1, rng);
        let blocks = (0..Self::RESIDUAL_BLOCKS)
            .map(|i| {
                let mut s = scope.sub(&format!("res{i}"));
                let a = SpectralConv::new(&mut s.sub("conv1"), width, width, 3, 1, 1, rng);
                let b = SpectralConv::new(&mut s.sub("conv2"), width, width, 3, 1, 1, rng);
                (a, b)
            })
            .collect();
        let output = SpectralConv::new(&mut scope.sub("out"), width, channels, 3, 1, 1, rng);
        let gain = scope.param("out.gain", Tensor::zeros(vec![channels, 1, 1]));
        Self { input, blocks, output, gain }
    }

    /// Tensors registered by one subnet.
    pub fn tensor_count() -> usize {
        (2 + 2 * Self::RESIDUAL_BLOCKS) * SpectralConv::TENSORS + 1
    }

    pub fn convs(&self) -> impl Iterator<Item = &SpectralConv> {
        std::iter::once(&self.input)
            .chain(self.blocks.iter().flat_map(|(a, b)| [a, b]))
            .chain(std::iter::once(&self.output))
    }

    pub fn forward<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Var<'t, T> {
        let mut h = self.input.forward(bind, x);
        for (a, b) in &self.blocks {
            let r = b.forward(bind, a.forward(bind, h).leaky_relu(LEAKY_SLOPE));
            h = h.add(r);
        }
        self.output.forward(bind, h.leaky_relu(LEAKY_SLOPE)).mul(bind.var(self.gain))
    }
}

fn check_finite<T: Float>(v: Var<'_, T>, term: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(RaegError::Numeric { term: term.to_string(), detail: format!("subnet output {:?}", v.shape()) })
    }
}

fn split<'t, T: Float>(x: Var<'t, T>) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let shape = x.shape();
    if shape.len() != 4 || shape[1] % 2 != 0 {
        return Err(RaegError::shape(format!("coupling needs [B, C, H, W] with even C, got {shape:?}")));
    }
    Ok(x.chunk2(1))
}

type Conditioner<'a, 't, T> = &'a dyn Fn(Var<'t, T>) -> Var<'t, T>;

/// The four conditioning functions of one coupling step.
pub struct CouplingFns<'a, 't, T> {
    pub theta1: Conditioner<'a, 't, T>,
    pub phi1: Conditioner<'a, 't, T>,
    pub theta2: Conditioner<'a, 't, T>,
    pub phi2: Conditioner<'a, 't, T>,
}

impl<'t, T: Float> CouplingFns<'_, 't, T> {
    fn eval(f: Conditioner<'_, 't, T>, x: Var<'t, T>, term: &str) -> Result<Var<'t, T>> {
        let y = f(x);
        check_finite(y, term)?;
        Ok(y)
    }

    pub fn forward(&self, x: Var<'t, T>, clamp: f64) -> Result<Var<'t, T>> {
        let (x1, x2) = split(x)?;
        let s1 = Self::eval(self.theta1, x2, "theta1")?.soft_clamp(clamp);
        let y1 = x1.mul(s1.exp()).add(Self::eval(self.phi1, x2, "phi1")?);
        let s2 = Self::eval(self.theta2, y1, "theta2")?.soft_clamp(clamp);
        let y2 = x2.mul(s2.exp()).add(Self::eval(self.phi2, y1, "phi2")?);
        Ok(Var::concat(&[y1, y2], 1))
    }

    pub fn inverse(&self, y: Var<'t, T>, clamp: f64) -> Result<Var<'t, T>> {
        let (y1, y2) = split(y)?;
        let s2 = Self::eval(self.theta2, y1, "theta2")?.soft_clamp(clamp);
        let x2 = y2.sub(Self::eval(self.phi2, y1, "phi2")?).div(s2.exp());
        let s1 = Self::eval(self.theta1, x2, "theta1")?.soft_clamp(clamp);
        let x1 = y1.sub(Self::eval(self.phi1, x2, "phi1")?).div(s1.exp());
        Ok(Var::concat(&[x1, x2], 1))
    }
}

/// One invertible coupling block with four independent subnets.
#[derive(Clone, Debug)]
pub struct CouplingBlock {
    pub channels: usize,
    pub clamp: f64,
    theta1: Subnet,
    phi1: Subnet,
    theta2: Subnet,
    phi2: Subnet,
}

impl CouplingBlock {
    pub const SUBNETS: usize = 4;

    pub fn new<T: Float, R: Rng + ?Sized>(
        scope: &mut Scope<'_, T>,
        channels: usize,
        width: usize,
        clamp: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if channels % 2 != 0 || channels == 0 {
            return Err(RaegError::shape(format!("coupling channels must be even and nonzero, got {channels}")));
        }
        if !(clamp > 0.0 && clamp.is_finite()) {
            return Err(RaegError::config("clamp", format!("must be positive and finite, got {clamp}")));
        }
        let half = channels / 2;
        Ok(Self {
            channels,
            clamp,
            theta1: Subnet::new(&mut scope.sub("theta1"), half, width, rng),
            phi1: Subnet::new(&mut scope.sub("phi1"), half, width, rng),
            theta2: Subnet::new(&mut scope.sub("theta2"), half, width, rng),
            phi2: Subnet::new(&mut scope.sub("phi2"), half, width, rng),
        })
    }

    pub fn subnets(&self) -> [&Subnet; 4] {
        [&self.theta1, &self.phi1, &self.theta2, &self.phi2]
    }

    pub fn power_iteration<T: Float>(&self, store: &mut ParamStore<T>) {
        for net in self.subnets() {
            net.convs().for_each(|c| c.power_iteration(store));
        }
    }

    fn check_channels<T: Float>(&self, x: Var<'_, T>) -> Result<()> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.channels {
            return Err(RaegError::shape(format!("coupling block expects {} channels, got {shape:?}", self.channels)));
        }
        Ok(())
    }

    pub fn forward<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_channels(x)?;
        let (t1, p1, t2, p2) = self.conditioners(bind);
        CouplingFns { theta1: &t1, phi1: &p1, theta2: &t2, phi2: &p2 }.forward(x, self.clamp)
    }

    pub fn inverse<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, y: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_channels(y)?;
        let (t1, p1, t2, p2) = self.conditioners(bind);
        CouplingFns { theta1: &t1, phi1: &p1, theta2: &t2, phi2: &p2 }.inverse(y, self.clamp)
    }

    #[allow(clippy::type_complexity)]
    fn conditioners<'a, 't, T: Float>(
        &'a self,
        bind: &'a Binding<'t, '_, T>,
    ) -> (
        impl Fn(Var<'t, T>) -> Var<'t, T> + 'a,
        impl Fn(Var<'t, T>) -> Var<'t, T> + 'a,
        impl Fn(Var<'t, T>) -> Var<'t, T> + 'a,
        impl Fn(Var<'t, T>) -> Var<'t, T> + 'a,
    ) {
        (
            move |x| self.theta1.forward(bind, x),
            move |x| self.phi1.forward(bind, x),
            move |x| self.theta2.forward(bind, x),
            move |x| self.phi2.forward(bind, x),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use raeg_autograd::gradcheck::check_sampled;
    use raeg_autograd::{ParamKind, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn block<T: Float>(channels: usize, width: usize, seed: u64) -> (ParamStore<T>, CouplingBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = CouplingBlock::new(&mut store.scope("blk"), channels, width, 2.0, &mut rng).unwrap();
        (store, block)
    }

    /// Gives every trainable tensor a random value so the block is far from identity.
    fn randomize<T: Float>(store: &mut ParamStore<T>, blk: &CouplingBlock, std: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(shape, std, &mut rng)).unwrap();
        }
        for _ in 0..30 {
            blk.power_iteration(store);
        }
    }

    #[test]
    fn zero_gain_is_identity() {
        let (store, blk) = block::<f32>(6, 8, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f32>::randn(vec![2, 6, 4, 4], 1.0, &mut rng);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, false);
        let y = blk.forward(&bind, tape.constant(x.clone())).unwrap().value();
        assert_eq!(y, x);
        let back = blk.inverse(&bind, tape.constant(x.clone())).unwrap().value();
        assert_eq!(back, x);
    }

    #[test]
    fn additive_special_case() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap());
        let zero: &dyn Fn(Var<'_, f64>) -> Var<'_, f64> = &|v| v.scale(0.0);
        let ident: &dyn Fn(Var<'_, f64>) -> Var<'_, f64> = &|v| v;
        let fns = CouplingFns { theta1: zero, phi1: ident, theta2: zero, phi2: zero };
        let y = fns.forward(x, 2.0).unwrap();
        assert_eq!(y.value().data(), &[11.0, 22.0, 10.0, 20.0]);
        assert_eq!(fns.inverse(y, 2.0).unwrap().value().data(), &[1.0, 2.0, 10.0, 20.0]);
    }

    #[test]
    fn random_block_roundtrip() {
        let (mut store, blk) = block::<f32>(12, 8, 3);
        randomize(&mut store, &blk, 0.3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::randn(vec![2, 12, 4, 6], 1.0, &mut rng);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, false);
        let y = blk.forward(&bind, tape.constant(x.clone())).unwrap();
        assert!(y.value().zip_map(&x, |a, b| a - b).max_abs() > 1e-2, "block should not be identity");
        let back = blk.inverse(&bind, y).unwrap().value();
        assert!(back.zip_map(&x, |a, b| a - b).max_abs() < 1e-4);

        let (mut store64, blk64) = block::<f64>(12, 8, 3);
        randomize(&mut store64, &blk64, 0.3, 4);
        let x64 = x.cast::<f64>();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store64, false);
        let y = blk64.forward(&bind, tape.constant(x64.clone())).unwrap();
        let back = blk64.inverse(&bind, y).unwrap().value();
        assert!(back.zip_map(&x64, |a, b| a - b).max_abs() < 1e-9);
    }

    #[test]
    fn log_scale_is_bounded() {
        let tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::from_vec(vec![5], vec![-1e6, -3.0, 0.0, 3.0, 1e6]).unwrap());
        for &v in t.soft_clamp(2.0).value().data() {
            assert!(v.abs() <= 2.0);
        }
    }

    #[test]
    fn odd_channels_and_bad_clamp_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        assert!(CouplingBlock::new(&mut store.scope("a"), 5, 4, 2.0, &mut rng).is_err());
        assert!(CouplingBlock::new(&mut store.scope("b"), 4, 4, 0.0, &mut rng).is_err());
        let (store, blk) = block::<f32>(4, 4, 0);
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, false);
        assert!(blk.forward(&bind, tape.constant(Tensor::zeros(vec![1, 6, 2, 2]))).is_err());
    }

    #[test]
    fn non_finite_subnet_output_is_reported() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones(vec![1, 2, 1, 1]));
        let bad: &dyn Fn(Var<'_, f64>) -> Var<'_, f64> = &|v| v.scale(f64::NAN);
        let id: &dyn Fn(Var<'_, f64>) -> Var<'_, f64> = &|v| v;
        let fns = CouplingFns { theta1: id, phi1: bad, theta2: id, phi2: id };
        match fns.forward(x, 2.0) {
            Err(RaegError::Numeric { term, .. }) => assert_eq!(term, "phi1"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mut store, blk) = block::<f64>(4, 4, 7);
        randomize(&mut store, &blk, 0.4, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::randn(vec![1, 4, 3, 3], 1.0, &mut rng);
        let probe = Tensor::<f64>::randn(vec![1, 4, 3, 3], 1.0, &mut rng);
        // input gradient
        let report = check_sampled(&[x.clone()], 1e-6, 24, &mut rng, |tape, v| {
            let bind = Binding::new(tape, &store, false);
            blk.forward(&bind, v[0]).unwrap().mul_const(&probe).sum()
        });
        assert!(report.max_rel_error < 1e-3, "input: {report:?}");
        // parameter gradients: perturb each trainable tensor through a rebuilt store
        let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect();
        let values: Vec<Tensor<f64>> = ids.iter().map(|&id| store.get(id).clone()).collect();
        let report = check_sampled(&values, 1e-6, 1, &mut rng, |tape, v| {
            let bind = Binding::new(tape, &store, false);
            bind.preset(&ids, v);
            blk.forward(&bind, tape.constant(x.clone())).unwrap().mul_const(&probe).sum()
        });
        assert!(report.checked >= 20);
        assert!(report.max_rel_error < 1e-3, "params: {report:?}");
    }

    #[test]
    fn spectral_normalize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let eye = Tensor::<f64>::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        let mut st = SpectralState::new(3, 3, &mut rng);
        let out = spectral_normalize(&eye, &mut st, true).unwrap();
        assert!(out.zip_map(&eye, |a, b| a - b).max_abs() < 1e-12);

        let three = eye.scale(3.0);
        let mut st = SpectralState::new(3, 3, &mut rng);
        let mut out = three.clone();
        for _ in 0..10 {
            out = spectral_normalize(&three, &mut st, true).unwrap();
        }
        assert!(out.zip_map(&eye, |a, b| a - b).max_abs() < 1e-9);

        let zero = Tensor::<f64>::zeros(vec![2, 3]);
        let mut st = SpectralState::new(2, 3, &mut rng);
        assert!(spectral_normalize(&zero, &mut st, true).unwrap().all_finite());
    }

    #[test]
    fn spectral_normalize_matches_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let w = Tensor::<f64>::randn(vec![4, 3], 1.0, &mut rng);
        let mut st = SpectralState::new(4, 3, &mut rng);
        let mut out = w.clone();
        for _ in 0..50 {
            out = spectral_normalize(&w, &mut st, true).unwrap();
        }
        let m = nalgebra::DMatrix::from_row_slice(4, 3, out.data());
        let top = m.singular_values().max();
        assert!((top - 1.0).abs() < 0.01, "top singular value {top}");
        // evaluation mode leaves the estimate untouched
        let before = st.clone();
        spectral_normalize(&w, &mut st, false).unwrap();
        assert_eq!(before, st);
    }

    #[test]
    fn conv_power_iteration_tracks_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut store = ParamStore::<f64>::new();
        let conv = SpectralConv::new(&mut store.scope("c"), 3, 5, 3, 1, 1, &mut rng);
        for _ in 0..30 {
            conv.power_iteration(&mut store);
        }
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, false);
        let w = conv.normalized_weight(&bind).value();
        let m = nalgebra::DMatrix::from_row_slice(5, 27, w.data());
        assert!((m.singular_values().max() - 1.0).abs() < 0.01);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn inverse_undoes_forward_for_any_weights(
            half in 1usize..4,
            width in 1usize..6,
            (h, w) in (1usize..5, 1usize..5),
            std in 0.05f64..0.6,
            seed in proptest::prelude::any::<u64>(),
        ) {
            let (mut store, blk) = block::<f64>(2 * half, width, seed);
            randomize(&mut store, &blk, std, seed ^ 1);
            let x = Tensor::<f64>::randn(vec![1, 2 * half, h, w], 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 2));
            let tape = Tape::new();
            let bind = Binding::new(&tape, &store, false);
            let y = blk.forward(&bind, tape.constant(x.clone())).unwrap();
            let back = blk.inverse(&bind, y).unwrap().value();
            proptest::prop_assert!(back.zip_map(&x, |a, b| a - b).max_abs() < 1e-9);
        }
    }
}
