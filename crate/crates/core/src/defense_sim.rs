//! Differentiable attack layer applied to protected images during training.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raeg_autograd::{Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RaegError, Result};
use crate::jpeg::{self, InterpolationWeights, JpegMethod};
use crate::resample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Identity,
    GaussianNoise,
    GaussianBlur,
    Rescale,
    RandomCrop,
    JpegSim,
}

pub const ALL_KINDS: [AttackKind; 6] = [
    AttackKind::Identity,
    AttackKind::GaussianNoise,
    AttackKind::GaussianBlur,
    AttackKind::Rescale,
    AttackKind::RandomCrop,
    AttackKind::JpegSim,
];

/// One fully parameterized attack. Noise carries its own seed so that a spec
/// always denotes the same function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttackSpec {
    Identity,
    GaussianNoise { sigma: f64, seed: u64 },
    GaussianBlur { kernel: usize, sigma: f64 },
    Rescale { factor: f64 },
    /// `ratio` is the kept area; `top`/`left` place the window within the slack, in `[0, 1]`.
    RandomCrop { ratio: f64, top: f64, left: f64 },
    JpegSim { qf: u32, weights: InterpolationWeights },
}

impl AttackSpec {
    pub fn kind(&self) -> AttackKind {
        match self {
            Self::Identity => AttackKind::Identity,
            Self::GaussianNoise { .. } => AttackKind::GaussianNoise,
            Self::GaussianBlur { .. } => AttackKind::GaussianBlur,
            Self::Rescale { .. } => AttackKind::Rescale,
            Self::RandomCrop { .. } => AttackKind::RandomCrop,
            Self::JpegSim { .. } => AttackKind::JpegSim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Err(RaegError::config(field, reason));
        match *self {
            Self::Identity => Ok(()),
            Self::GaussianNoise { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad("sigma", format!("noise σ must be finite and ≥ 0, got {sigma}"))
            }
            Self::GaussianBlur { kernel, .. } if kernel < 3 || kernel % 2 == 0 => {
                bad("kernel", format!("blur kernel must be odd and ≥ 3, got {kernel}"))
            }
            Self::GaussianBlur { sigma, .. } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad("sigma", format!("blur σ must be finite and ≥ 0, got {sigma}"))
            }
            Self::Rescale { factor } if !(factor > 0.0 && factor <= 1.0) => {
                bad("factor", format!("rescale factor must lie in (0, 1], got {factor}"))
            }
            Self::RandomCrop { ratio, .. } if !(ratio > 0.0 && ratio <= 1.0) => {
                bad("ratio", format!("crop ratio must lie in (0, 1], got {ratio}"))
            }
            Self::RandomCrop { top, left, .. } if !((0.0..=1.0).contains(&top) && (0.0..=1.0).contains(&left)) => {
                bad("top/left", "crop offsets must lie in [0, 1]".into())
            }
            Self::JpegSim { qf, .. } => jpeg::check_quality(qf),
            _ => Ok(()),
        }
    }
}

/// Ranges `sample_attack` draws from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub kinds: Vec<AttackKind>,
    pub noise_sigma: [f64; 2],
    pub blur_kernels: Vec<usize>,
    pub blur_sigma: [f64; 2],
    pub rescale_factor: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub jpeg_qf: [u32; 2],
    pub jpeg_methods: Vec<JpegMethod>,
    /// Draw one attack per image instead of one per batch.
    pub per_sample: bool,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kinds: ALL_KINDS.to_vec(),
            noise_sigma: [0.0, 0.05],
            blur_kernels: vec![3, 5],
            blur_sigma: [0.5, 1.5],
            rescale_factor: [0.5, 1.0],
            crop_ratio: [0.8, 1.0],
            jpeg_qf: [jpeg::QF_MIN, jpeg::QF_MAX],
            jpeg_methods: jpeg::ALL_METHODS.to_vec(),
            per_sample: false,
        }
    }
}

impl AttackConfig {
    pub fn only(kinds: &[AttackKind]) -> Self {
        Self { kinds: kinds.to_vec(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let range = |field: &str, [lo, hi]: [f64; 2], ok: &dyn Fn(f64) -> bool| {
            if lo <= hi && ok(lo) && ok(hi) {
                Ok(())
            } else {
                Err(RaegError::config(format!("attacks.{field}"), format!("invalid range [{lo}, {hi}]")))
            }
        };
        if self.kinds.is_empty() {
            return Err(RaegError::config("attacks.kinds", "no attack kinds enabled"));
        }
        range("noise_sigma", self.noise_sigma, &|v| v >= 0.0 && v.is_finite())?;
        range("blur_sigma", self.blur_sigma, &|v| v >= 0.0 && v.is_finite())?;
        range("rescale_factor", self.rescale_factor, &|v| v > 0.0 && v <= 1.0)?;
        range("crop_ratio", self.crop_ratio, &|v| v > 0.0 && v <= 1.0)?;
        if self.blur_kernels.is_empty() || self.blur_kernels.iter().any(|&k| k < 3 || k % 2 == 0) {
            return Err(RaegError::config("attacks.blur_kernels", "kernels must be odd and ≥ 3"));
        }
        let [q0, q1] = self.jpeg_qf;
        if q0 > q1 || jpeg::check_quality(q0).is_err() || jpeg::check_quality(q1).is_err() {
            return Err(RaegError::config("attacks.jpeg_qf", format!("invalid range [{q0}, {q1}] (allowed 10..=100)")));
        }
        if self.jpeg_methods.is_empty() {
            return Err(RaegError::config("attacks.jpeg_methods", "at least one JPEG method is required"));
        }
        Ok(())
    }
}

fn draw<R: Rng + ?Sized>(rng: &mut R, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Uniform kind, then uniform parameters within the configured ranges.
pub fn sample_attack<R: Rng + ?Sized>(rng: &mut R, cfg: &AttackConfig) -> Result<AttackSpec> {
    cfg.validate()?;
    let kind = cfg.kinds[rng.random_range(0..cfg.kinds.len())];
    Ok(match kind {
        AttackKind::Identity => AttackSpec::Identity,
        AttackKind::GaussianNoise => AttackSpec::GaussianNoise { sigma: draw(rng, cfg.noise_sigma), seed: rng.random() },
        AttackKind::GaussianBlur => AttackSpec::GaussianBlur {
            kernel: cfg.blur_kernels[rng.random_range(0..cfg.blur_kernels.len())],
            sigma: draw(rng, cfg.blur_sigma),
        },
        AttackKind::Rescale => AttackSpec::Rescale { factor: draw(rng, cfg.rescale_factor) },
        AttackKind::RandomCrop => AttackSpec::RandomCrop {
            ratio: draw(rng, cfg.crop_ratio),
            top: rng.random_range(0.0..=1.0),
            left: rng.random_range(0.0..=1.0),
        },
        AttackKind::JpegSim => {
            let qf = rng.random_range(cfg.jpeg_qf[0]..=cfg.jpeg_qf[1]);
            // flat Dirichlet over the enabled methods
            let raw: Vec<f64> = cfg.jpeg_methods.iter().map(|_| -rng.random_range(f64::MIN_POSITIVE..1.0).ln()).collect();
            let total: f64 = raw.iter().sum();
            let weights = InterpolationWeights::new(cfg.jpeg_methods.iter().zip(&raw).map(|(&m, &r)| (m, r / total)).collect())?;
            AttackSpec::JpegSim { qf, weights }
        }
    })
}

fn crop_window(n: usize, side: f64, offset: f64) -> (usize, usize) {
    let len = ((n as f64 * side).round() as usize).clamp(1, n);
    let start = ((n - len) as f64 * offset).round() as usize;
    (start, len)
}

/// Apply `spec` to a `[B, C, H, W]` batch; the output has the same shape.
pub fn apply_attack<'t, T: Float>(spec: &AttackSpec, x: Var<'t, T>) -> Result<Var<'t, T>> {
    spec.validate()?;
    let shape = x.shape();
    let &[_, _, h, w] = shape.as_slice() else {
        return Err(RaegError::shape(format!("attacks expect [B, C, H, W], got {shape:?}")));
    };
    Ok(match *spec {
        AttackSpec::Identity => x,
        AttackSpec::GaussianNoise { sigma, seed } => {
            if sigma == 0.0 {
                x
            } else {
                x.add_const(&Tensor::randn(shape, sigma, &mut ChaCha8Rng::seed_from_u64(seed)))
            }
        }
        AttackSpec::GaussianBlur { kernel, sigma } => {
            resample::separable(x, &resample::blur_matrix(h, kernel, sigma), &resample::blur_matrix(w, kernel, sigma))
        }
        AttackSpec::Rescale { factor } => {
            resample::separable(x, &resample::rescale_matrix(h, factor), &resample::rescale_matrix(w, factor))
        }
        AttackSpec::RandomCrop { ratio, top, left } => {
            let side = ratio.sqrt();
            let (t, th) = crop_window(h, side, top);
            let (l, tw) = crop_window(w, side, left);
            resample::separable(x, &resample::crop_resize_matrix(h, t, th), &resample::crop_resize_matrix(w, l, tw))
        }
        AttackSpec::JpegSim { qf, ref weights } => jpeg::jpeg_sim(x, qf, weights)?,
    })
}

/// One spec per image.
pub fn apply_attack_per_sample<'t, T: Float>(specs: &[AttackSpec], x: Var<'t, T>) -> Result<Var<'t, T>> {
    if specs.len() != x.dim(0) {
        return Err(RaegError::shape(format!("{} attack specs for a batch of {}", specs.len(), x.dim(0))));
    }
    let parts = specs.iter().enumerate().map(|(i, s)| apply_attack(s, x.narrow(0, i, 1))).collect::<Result<Vec<_>>>()?;
    Ok(Var::concat(&parts, 0))
}

pub fn apply_attack_tensor<T: Float>(spec: &AttackSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
    let tape = Tape::new();
    Ok(apply_attack(spec, tape.constant(x.clone()))?.value())
}
