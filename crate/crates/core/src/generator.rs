//! The U-shaped invertible generator.
//!
//! The analysis half applies `scales` rounds of Haar downsampling followed by
//! `blocks_per_scale` coupling blocks; the synthesis half mirrors it with its
//! own blocks followed by Haar upsampling. Every stage is invertible, so
//! [`Generator::recover`] runs the chain backwards.

use rand::Rng;
use raeg_autograd::{Binding, Float, ParamStore, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Architecture;
use crate::coupling::{CouplingBlock, Subnet};
use crate::error::{RaegError, Result};
use crate::haar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub scales: usize,
    pub blocks_per_scale: usize,
    pub subnet_width: usize,
    pub clamp: f64,
    pub input_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { scales: 3, blocks_per_scale: 4, subnet_width: 32, clamp: 2.0, input_channels: 3 }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales < 1 {
            return Err(RaegError::config("model.scales", "must be at least 1"));
        }
        if self.blocks_per_scale < 1 {
            return Err(RaegError::config("model.blocks_per_scale", "must be at least 1"));
        }
        if self.subnet_width < 1 {
            return Err(RaegError::config("model.subnet_width", "must be at least 1"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(RaegError::config("model.clamp", "must be positive and finite"));
        }
        if self.input_channels < 1 {
            return Err(RaegError::config("model.input_channels", "must be at least 1"));
        }
        Ok(())
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.scales
    }

    pub fn subnet_count(&self) -> usize {
        CouplingBlock::SUBNETS * 2 * self.scales * self.blocks_per_scale
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    config: GeneratorConfig,
    /// `down[s]` runs after the `s`-th Haar analysis.
    down: Vec<Vec<CouplingBlock>>,
    /// `up[s]` runs before the Haar synthesis back to level `s`.
    up: Vec<Vec<CouplingBlock>>,
}

impl Generator {
    pub fn new<T: Float, R: Rng + ?Sized>(config: GeneratorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let build = |half: &str, store: &mut ParamStore<T>, rng: &mut R| -> Result<Vec<Vec<CouplingBlock>>> {
            (0..config.scales)
                .map(|s| {
                    let channels = config.input_channels * 4usize.pow(s as u32 + 1);
                    (0..config.blocks_per_scale)
                        .map(|b| {
                            let mut scope = store.scope(format!("gen.{half}{s}.block{b}"));
                            CouplingBlock::new(&mut scope, channels, config.subnet_width, config.clamp, rng)
                        })
                        .collect()
                })
                .collect()
        };
        let down = build("down", store, rng)?;
        let up = build("up", store, rng)?;
        Ok(Self { config, down, up })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// Tensors per checkpoint: every subnet's convs, gains and spectral state.
    pub fn tensor_count(&self) -> usize {
        self.config.subnet_count() * Subnet::tensor_count()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &CouplingBlock> {
        self.down.iter().chain(&self.up).flatten()
    }

    /// One power-iteration step for every spectral-normalized conv.
    pub fn power_iteration<T: Float>(&self, store: &mut ParamStore<T>) {
        self.blocks().for_each(|b| b.power_iteration(store));
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let m = self.config.size_multiple();
        match *shape {
            [_, c, h, w] if c == self.config.input_channels && h % m == 0 && w % m == 0 && h > 0 && w > 0 => Ok(()),
            [_, c, _, _] if c != self.config.input_channels => Err(RaegError::shape(format!(
                "generator expects {} channels, got {shape:?}",
                self.config.input_channels
            ))),
            [_, _, h, w] => Err(RaegError::shape(format!(
                "spatial dims {h}×{w} are not divisible by 2^scales = {m}"
            ))),
            _ => Err(RaegError::shape(format!("generator expects [B, C, H, W], got {shape:?}"))),
        }
    }

    /// Forward pass producing the protected image (unclipped).
    pub fn protect<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, image: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&image.shape())?;
        let mut h = image;
        for blocks in &self.down {
            h = haar::forward(h)?;
            for b in blocks {
                h = b.forward(bind, h)?;
            }
        }
        for blocks in self.up.iter().rev() {
            for b in blocks {
                h = b.forward(bind, h)?;
            }
            h = haar::inverse(h)?;
        }
        Ok(h)
    }

    /// Inverse pass without the final clipping.
    pub fn recover_raw<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, protected: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&protected.shape())?;
        let mut h = protected;
        for blocks in &self.up {
            h = haar::forward(h)?;
            for b in blocks.iter().rev() {
                h = b.inverse(bind, h)?;
            }
        }
        for blocks in self.down.iter().rev() {
            for b in blocks.iter().rev() {
                h = b.inverse(bind, h)?;
            }
            h = haar::inverse(h)?;
        }
        Ok(h)
    }

    /// Inverse pass, clipped to `[0, 1]`.
    pub fn recover<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, protected: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.recover_raw(bind, protected)?.clamp(0.0, 1.0))
    }

    /// Evaluation-mode [`Generator::protect`] on a plain tensor.
    pub fn protect_tensor<T: Float>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, false);
        Ok(self.protect(&bind, tape.constant(image.clone()))?.value())
    }

    /// Evaluation-mode [`Generator::recover`] on a plain tensor.
    pub fn recover_tensor<T: Float>(&self, store: &ParamStore<T>, protected: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, false);
        Ok(self.recover(&bind, tape.constant(protected.clone()))?.value())
    }

    pub fn recover_raw_tensor<T: Float>(&self, store: &ParamStore<T>, protected: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bind = Binding::new(&tape, store, false);
        Ok(self.recover_raw(&bind, tape.constant(protected.clone()))?.value())
    }
}

impl Architecture for Generator {
    type Config = GeneratorConfig;
    const KIND: &'static str = "generator";

    fn build<T: Float, R: Rng + ?Sized>(config: &GeneratorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Generator::new(config.clone(), store, rng)
    }

    fn config(&self) -> &GeneratorConfig {
        &self.config
    }
}

fn quantize_value<T: Float>(v: T) -> T {
    let levels = T::of_f64(255.0);
    (v.max(T::zero()).min(T::one()) * levels).round() / levels
}

/// Clip to `[0, 1]` and round to the nearest multiple of 1/255.
pub fn quantize<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(quantize_value)
}

/// [`quantize`] in the forward pass. The clip keeps its true gradient (zero for
/// saturated pixels) and only the rounding is passed straight through.
pub fn quantize_ste<'t, T: Float>(x: Var<'t, T>) -> Var<'t, T> {
    x.clamp(0.0, 1.0).straight_through(quantize_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use raeg_autograd::ParamKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> GeneratorConfig {
        GeneratorConfig { scales: 2, blocks_per_scale: 2, subnet_width: 4, clamp: 2.0, input_channels: 3 }
    }

    fn randomized(config: GeneratorConfig, seed: u64) -> (Generator, ParamStore<f32>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = Generator::new(config, &mut store, &mut rng).unwrap();
        let ids: Vec<_> = store.ids().filter(|&id| store.kind(id) == ParamKind::Trainable).collect();
        for id in ids {
            let shape = store.get(id).shape().to_vec();
            store.set(id, Tensor::randn(shape, 0.2, &mut rng)).unwrap();
        }
        for _ in 0..20 {
            g.power_iteration(&mut store);
        }
        (g, store)
    }

    #[test]
    fn fresh_generator_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(tiny(), &mut store, &mut rng).unwrap();
        let x = Tensor::<f32>::rand_uniform(vec![2, 3, 8, 8], 0.0, 1.0, &mut rng);
        // couplings are exact identities; only Haar sums round
        let p = g.protect_tensor(&store, &x).unwrap();
        assert!(p.zip_map(&x, |a, b| a - b).max_abs() < 1e-6);
        let grid = quantize(&x);
        assert_eq!(quantize(&g.protect_tensor(&store, &grid).unwrap()), grid);
    }

    #[test]
    fn random_generator_roundtrips() {
        let (g, store) = randomized(tiny(), 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::rand_uniform(vec![2, 3, 8, 12], 0.0, 1.0, &mut rng);
        let p = g.protect_tensor(&store, &x).unwrap();
        assert_eq!(p.shape(), x.shape());
        assert!(p.zip_map(&x, |a, b| a - b).max_abs() > 1e-3);
        let back = g.recover_tensor(&store, &p).unwrap();
        assert_eq!(back.shape(), x.shape());
        assert!(back.zip_map(&x, |a, b| a - b).max_abs() < 1e-3);
    }

    #[test]
    fn indivisible_dims_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(tiny(), &mut store, &mut rng).unwrap();
        let err = g.protect_tensor(&store, &Tensor::zeros(vec![1, 3, 6, 8])).unwrap_err();
        assert!(matches!(err, RaegError::Shape(_)), "{err}");
        assert!(g.recover_tensor(&store, &Tensor::zeros(vec![1, 1, 8, 8])).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let bad = GeneratorConfig { scales: 0, ..tiny() };
        assert!(matches!(Generator::new(bad, &mut store, &mut rng), Err(RaegError::Config { .. })));
    }

    #[test]
    fn tensor_count_matches_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::<f32>::new();
        let cfg = tiny();
        let g = Generator::new(cfg.clone(), &mut store, &mut rng).unwrap();
        // 4 subnets × (2 halves × scales × blocks); each subnet: 6 convs × 4 tensors + 1 gain
        let subnets = 4 * 2 * cfg.scales * cfg.blocks_per_scale;
        assert_eq!(cfg.subnet_count(), subnets);
        assert_eq!(store.len(), subnets * (6 * 4 + 1));
        assert_eq!(g.tensor_count(), store.len());
    }

    #[test]
    fn quantize_examples() {
        let x = Tensor::<f64>::from_vec(vec![5], vec![0.5, -0.2, 1.3, 0.0, 1.0]).unwrap();
        let q = quantize(&x);
        assert!((q.data()[0] - 128.0 / 255.0).abs() < 1e-15);
        assert_eq!(&q.data()[1..], &[0.0, 1.0, 0.0, 1.0]);
        let grid = Tensor::<f32>::from_fn(vec![256], |i| i as f32 / 255.0);
        assert_eq!(quantize(&grid), grid);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = Tensor::<f64>::rand_uniform(vec![4096], -0.2, 1.2, &mut rng);
        let err = u.clamp(0.0, 1.0).zip_map(&quantize(&u), |a, b| a - b).max_abs();
        assert!(err <= 1.0 / 510.0 + 1e-12);
    }

    #[test]
    fn identity_generator_quantized_recovery_psnr() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut store = ParamStore::<f32>::new();
        let g = Generator::new(tiny(), &mut store, &mut rng).unwrap();
        let x = Tensor::<f32>::rand_uniform(vec![4, 3, 16, 16], 0.0, 1.0, &mut rng);
        let rec = g.recover_tensor(&store, &quantize(&g.protect_tensor(&store, &x).unwrap())).unwrap();
        // oracle: PSNR of plain 8-bit rounding of the same batch
        let oracle = crate::metrics::psnr(&x, &quantize(&x)).unwrap();
        let got = crate::metrics::psnr(&x, &rec).unwrap();
        assert!((got - oracle).abs() < 1e-3, "{got} vs {oracle}");
        assert!(got >= 48.0, "{got}");
    }
}
