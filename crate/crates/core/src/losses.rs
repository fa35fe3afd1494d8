//! Training objectives and their weighted total.

use raeg_autograd::{Binding, Float, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RaegError, Result};
use crate::targets::{Discriminator, Ensemble, FeatureExtractor};

/// Classifier and discriminator logits are clamped into ±this before any
/// softmax or sigmoid, which bounds the adversarial CE term.
pub const LOGIT_CLAMP: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// perceptual feature term inside the recovery loss
    pub alpha: f64,
    /// recovery loss
    pub beta: f64,
    /// classification loss
    pub gamma: f64,
    /// generator GAN loss
    pub delta: f64,
    /// coefficient of the negative CE on attacked images
    pub epsilon: f64,
    /// Softmax temperature of the attacked CE. Above 1 it keeps a gradient on confidently classified samples.
    pub attack_temperature: f64,
    /// Per-sample cap on the attacked CE; a sample already past it contributes no gradient. `None` leaves it unbounded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attack_ce_cap: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 0.01, beta: 1.0, gamma: 0.005, delta: 0.01, epsilon: 2.0, attack_temperature: 1.0, attack_ce_cap: None }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma), ("delta", self.delta), ("epsilon", self.epsilon)] {
            if !v.is_finite() {
                return Err(RaegError::config(format!("losses.{name}"), format!("must be finite, got {v}")));
            }
        }
        match self.attack_ce_cap {
            Some(c) if !(c > 0.0 && c.is_finite()) => Err(RaegError::config("losses.attack_ce_cap", format!("must be positive, got {c}"))),
            _ if !(self.attack_temperature > 0.0 && self.attack_temperature.is_finite()) => {
                Err(RaegError::config("losses.attack_temperature", format!("must be positive, got {}", self.attack_temperature)))
            }
            _ => Ok(()),
        }
    }

    pub fn combine(&self, prt: f64, rev: f64, cls: f64, gan: f64) -> f64 {
        prt + self.beta * rev + self.gamma * cls + self.delta * gan
    }
}

/// Scalars from one training step. `rev` already contains `alpha * per`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub prt: f64,
    pub rev: f64,
    pub per: f64,
    pub cls: f64,
    pub gan: f64,
    pub dis: f64,
    pub total: f64,
    /// L2 norm of each weighted term's generator gradient, when requested.
    #[serde(default)]
    pub grad_norms: Vec<(String, f64)>,
}

impl LossReport {
    pub const FIELDS: [&'static str; 7] = ["prt", "rev", "per", "cls", "gan", "dis", "total"];

    pub fn values(&self) -> [f64; 7] {
        [self.prt, self.rev, self.per, self.cls, self.gan, self.dis, self.total]
    }
}

fn check_shapes<T: Float>(a: Var<'_, T>, b: Var<'_, T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(RaegError::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn mean_l1<'t, T: Float>(a: Var<'t, T>, b: Var<'t, T>) -> Var<'t, T> {
    a.sub(b).abs().mean()
}

/// Mean absolute difference between the original and the protected image.
pub fn loss_prt<'t, T: Float>(image: Var<'t, T>, protected: Var<'t, T>) -> Result<Var<'t, T>> {
    check_shapes(image, protected, "loss_prt")?;
    Ok(mean_l1(image, protected))
}

/// Mean squared PSNR shortfall below `target_db`, per image. Zero inside the budget.
pub fn loss_budget<'t, T: Float>(image: Var<'t, T>, protected: Var<'t, T>, target_db: f64) -> Result<Var<'t, T>> {
    check_shapes(image, protected, "loss_budget")?;
    let mse = protected.sub(image).sqr().mean_trailing(3).add_scalar(1e-10);
    let shortfall = mse.ln().scale(10.0 / std::f64::consts::LN_10).add_scalar(target_db).relu();
    Ok(shortfall.sqr().mean())
}

/// Recovery loss and its unweighted feature term, as `(rev, per)`.
pub fn loss_rev<'t, T: Float>(
    bind: &Binding<'t, '_, T>,
    features: Option<&FeatureExtractor>,
    image: Var<'t, T>,
    recovered: Var<'t, T>,
    alpha: f64,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    check_shapes(image, recovered, "loss_rev")?;
    let pixel = mean_l1(image, recovered);
    let per = match features {
        Some(f) if alpha != 0.0 => mean_l1(f.features(bind, image.detach())?, f.features(bind, recovered)?),
        _ => bind.tape().constant(raeg_autograd::Tensor::full(vec![], T::zero())),
    };
    Ok((pixel.add(per.scale(alpha)), per))
}

fn mean_ce<'t, T: Float>(logits: &[Var<'t, T>], labels: &[usize], temperature: f64, cap: Option<f64>) -> Var<'t, T> {
    let n = logits.len() as f64;
    // with a cap the term is already bounded, and clamping confident logits would mask their gradient
    let ce = |l: Var<'t, T>| {
        let l = if temperature == 1.0 { l } else { l.scale(1.0 / temperature) };
        match cap {
            Some(c) => l.cross_entropy_rows(labels).clamp(0.0, c).mean(),
            None => clamped(l).cross_entropy(labels),
        }
    };
    logits.iter().map(|&l| ce(l)).reduce(|a, b| a.add(b)).expect("non-empty ensemble").scale(1.0 / n)
}

fn check_labels(labels: &[usize], batch: usize, classes: usize) -> Result<()> {
    if labels.len() != batch {
        return Err(RaegError::shape(format!("{} labels for a batch of {batch}", labels.len())));
    }
    match labels.iter().find(|&&l| l >= classes) {
        Some(&label) => Err(RaegError::Label { label, classes }),
        None => Ok(()),
    }
}

/// Classification loss from precomputed per-member logits.
pub fn cls_from_logits<'t, T: Float>(
    recovered: &[Var<'t, T>],
    attacked: &[Var<'t, T>],
    labels: &[usize],
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    let first = recovered.first().ok_or_else(|| RaegError::config("targets", "no ensemble members"))?;
    let shape = first.shape();
    check_labels(labels, shape[0], shape[1])?;
    Ok(mean_ce(recovered, labels, 1.0, None).sub(mean_ce(attacked, labels, w.attack_temperature, w.attack_ce_cap).scale(w.epsilon)))
}

/// Mean-member CE on the recovered image minus `epsilon` times mean-member (tempered, capped) CE on the attacked one.
pub fn loss_cls<'t, T: Float>(
    bind: &Binding<'t, '_, T>,
    ensemble: &Ensemble,
    recovered: Var<'t, T>,
    attacked: Var<'t, T>,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Var<'t, T>> {
    check_labels(labels, recovered.dim(0), ensemble.num_classes())?;
    let r = ensemble.logits(bind, recovered)?;
    let a = ensemble.logits(bind, attacked)?;
    cls_from_logits(&r, &a, labels, w)
}

fn clamped<'t, T: Float>(logits: Var<'t, T>) -> Var<'t, T> {
    logits.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

/// −E[log σ(z)] = E[softplus(−z)]
pub fn gan_from_logits<'t, T: Float>(fake: Var<'t, T>) -> Var<'t, T> {
    clamped(fake).scale(-1.0).softplus().mean()
}

/// −E[log σ(z_real)] − E[log(1 − σ(z_fake))]
pub fn dis_from_logits<'t, T: Float>(real: Var<'t, T>, fake: Var<'t, T>) -> Var<'t, T> {
    clamped(real).scale(-1.0).softplus().mean().add(clamped(fake).softplus().mean())
}

pub fn loss_gan<'t, T: Float>(bind: &Binding<'t, '_, T>, disc: &Discriminator, protected: Var<'t, T>) -> Result<Var<'t, T>> {
    Ok(gan_from_logits(disc.logits(bind, protected)?))
}

pub fn loss_dis<'t, T: Float>(bind: &Binding<'t, '_, T>, disc: &Discriminator, image: Var<'t, T>, protected: Var<'t, T>) -> Result<Var<'t, T>> {
    check_shapes(image, protected, "loss_dis")?;
    Ok(dis_from_logits(disc.logits(bind, image)?, disc.logits(bind, protected)?))
}

/// Generator-side terms of one step.
#[derive(Clone, Copy)]
pub struct LossTerms<'t, T> {
    pub prt: Var<'t, T>,
    pub rev: Var<'t, T>,
    pub per: Var<'t, T>,
    pub cls: Var<'t, T>,
    pub gan: Var<'t, T>,
}

/// Weighted generator objective plus its report. `dis` comes from the separate discriminator step.
pub fn loss_total<'t, T: Float>(terms: &LossTerms<'t, T>, dis: f64, w: &LossWeights) -> Result<(Var<'t, T>, LossReport)> {
    let value = |name: &str, v: Var<'t, T>| {
        let x = v.item().as_f64();
        if x.is_finite() {
            Ok(x)
        } else {
            Err(RaegError::Numeric { term: name.to_string(), detail: format!("loss evaluated to {x}") })
        }
    };
    let prt = value("prt", terms.prt)?;
    let rev = value("rev", terms.rev)?;
    let per = value("per", terms.per)?;
    let cls = value("cls", terms.cls)?;
    let gan = value("gan", terms.gan)?;
    if !dis.is_finite() {
        return Err(RaegError::Numeric { term: "dis".into(), detail: format!("loss evaluated to {dis}") });
    }
    let total = terms.prt.add(terms.rev.scale(w.beta)).add(terms.cls.scale(w.gamma)).add(terms.gan.scale(w.delta));
    let report = LossReport { prt, rev, per, cls, gan, dis, total: total.item().as_f64(), grad_norms: Vec::new() };
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use raeg_autograd::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eps(epsilon: f64) -> LossWeights {
        LossWeights { epsilon, ..LossWeights::default() }
    }

    #[test]
    fn pixel_losses() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::rand_uniform(vec![2, 3, 4, 4], 0.0, 1.0, &mut rng);
        let b = Tensor::rand_uniform(vec![2, 3, 4, 4], 0.0, 1.0, &mut rng);
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        assert_eq!(loss_prt(va, va).unwrap().item(), 0.0);
        let shifted = tape.constant(a.map(|v| v + 0.1));
        assert!((loss_prt(va, shifted).unwrap().item() - 0.1).abs() < 1e-12);
        let oracle: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
        assert!((loss_prt(va, vb).unwrap().item() - oracle).abs() < 1e-12);
        assert!(loss_prt(va, tape.constant(Tensor::zeros(vec![1, 3, 4, 4]))).is_err());
    }

    #[test]
    fn gan_examples() {
        let tape = Tape::<f64>::new();
        let zeros = tape.constant(Tensor::zeros(vec![5]));
        let ln2 = std::f64::consts::LN_2;
        assert!((dis_from_logits(zeros, zeros).item() - 2.0 * ln2).abs() < 1e-12);
        assert!((gan_from_logits(zeros).item() - ln2).abs() < 1e-12);
        let perfect = dis_from_logits(tape.constant(Tensor::full(vec![5], f64::INFINITY)), tape.constant(Tensor::full(vec![5], f64::NEG_INFINITY)));
        assert!(perfect.item() < 1e-12 && perfect.item() >= 0.0);
    }

    #[test]
    fn cls_examples() {
        let tape = Tape::<f64>::new();
        let k = 10;
        let labels = [3, 7];
        let confident = tape.constant(Tensor::from_fn(vec![2, k], |i| if i % k == labels[i / k] { 60.0 } else { 0.0 }));
        let uniform = tape.constant(Tensor::zeros(vec![2, k]));
        let l = cls_from_logits(&[confident, confident], &[uniform, uniform], &labels, &eps(2.0)).unwrap();
        assert!((l.item() + 2.0 * (k as f64).ln()).abs() < 1e-9);
        let no_eps = cls_from_logits(&[uniform], &[confident], &labels, &eps(0.0)).unwrap();
        assert!((no_eps.item() - (k as f64).ln()).abs() < 1e-12);
        assert!(matches!(cls_from_logits(&[uniform], &[uniform], &[3, 10], &eps(1.0)), Err(RaegError::Label { label: 10, .. })));
    }

    #[test]
    fn cls_matches_scalar_oracle() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let labels = [0, 4, 2];
        let logits: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(vec![3, 5], 2.0, &mut rng)).collect();
        let ce = |t: &Tensor<f64>| {
            t.data()
                .chunks(5)
                .zip(&labels)
                .map(|(row, &l)| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[l])
                .sum::<f64>()
                / 3.0
        };
        let oracle = (ce(&logits[0]) + ce(&logits[1])) / 2.0 - 1.5 * (ce(&logits[2]) + ce(&logits[3])) / 2.0;
        let v: Vec<_> = logits.iter().map(|t| tape.constant(t.clone())).collect();
        let got = cls_from_logits(&v[..2], &v[2..], &labels, &eps(1.5)).unwrap().item();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }

    #[test]
    fn tempered_capped_attack_term_matches_oracle() {
        let tape = Tape::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let labels = [1, 0, 3, 3];
        let (temp, cap) = (4.0, 2.08);
        let raw = Tensor::<f64>::randn(vec![4, 5], 3.0, &mut rng);
        let rows: Vec<f64> = raw
            .data()
            .chunks(5)
            .zip(&labels)
            .map(|(row, &l)| row.iter().map(|v| (v / temp).exp()).sum::<f64>().ln() - row[l] / temp)
            .collect();
        assert!(rows.iter().any(|&r| r > cap) && rows.iter().any(|&r| r < cap), "{rows:?}");
        let oracle = -2.0 * rows.iter().map(|r| r.min(cap)).sum::<f64>() / 4.0;
        let w = LossWeights { attack_temperature: temp, attack_ce_cap: Some(cap), ..eps(2.0) };
        let zero = tape.constant(Tensor::full(vec![4, 5], 0.0));
        let recovered_ce = (5f64).ln();
        let a = tape.leaf(raw);
        let got = cls_from_logits(&[zero], &[a], &labels, &w).unwrap();
        assert!((got.item() - recovered_ce - oracle).abs() < 1e-10);
        // samples past the cap get no gradient
        let g = tape.backward(got);
        let g = g.get(a).unwrap();
        for (i, r) in rows.iter().enumerate() {
            let row_norm: f64 = g.data()[i * 5..(i + 1) * 5].iter().map(|v| v.abs()).sum();
            assert_eq!(row_norm == 0.0, *r > cap, "row {i}: ce {r}, grad {row_norm}");
        }
        assert!(LossWeights { attack_temperature: 0.0, ..w }.validate().is_err());
        assert!(LossWeights { attack_ce_cap: Some(-1.0), ..w }.validate().is_err());
    }

    #[test]
    fn budget_is_squared_psnr_shortfall() {
        let tape = Tape::<f64>::new();
        let image = Tensor::full(vec![2, 3, 4, 4], 0.5);
        // image 0 at 20 dB (uniform 0.1 offset), image 1 at 40 dB
        let protected = Tensor::from_fn(vec![2, 3, 4, 4], |i| if i < 48 { 0.6 } else { 0.51 });
        let b = loss_budget(tape.constant(image), tape.constant(protected), 28.0).unwrap().item();
        assert!((b - 64.0 / 2.0).abs() < 1e-6, "{b}");
    }

    fn terms<'t>(tape: &'t Tape<f64>, vals: [f64; 4]) -> LossTerms<'t, f64> {
        let c = |v: f64| tape.constant(Tensor::full(vec![], v));
        LossTerms { prt: c(vals[0]), rev: c(vals[1]), per: c(0.0), cls: c(vals[2]), gan: c(vals[3]) }
    }

    #[test]
    fn total_decomposition() {
        let tape = Tape::<f64>::new();
        let w = LossWeights::default();
        let (_, r) = loss_total(&terms(&tape, [1.0, 2.0, 3.0, 4.0]), 0.5, &w).unwrap();
        assert!((r.total - 3.055).abs() < 1e-12);
        assert_eq!(r.total, w.combine(r.prt, r.rev, r.cls, r.gan));
        assert_eq!(loss_total(&terms(&tape, [0.0; 4]), 0.0, &w).unwrap().1.total, 0.0);
        let prt_only = LossWeights { beta: 0.0, gamma: 0.0, delta: 0.0, ..w };
        assert_eq!(loss_total(&terms(&tape, [1.5, 2.0, 3.0, 4.0]), 0.0, &prt_only).unwrap().1.total, 1.5);
        match loss_total(&terms(&tape, [1.0, 2.0, f64::NAN, 4.0]), 0.0, &w) {
            Err(RaegError::Numeric { term, .. }) => assert_eq!(term, "cls"),
            other => panic!("expected numeric error, got {:?}", other.map(|r| r.1)),
        }
        assert!(loss_total(&terms(&tape, [1.0, 2.0, 3.0, 4.0]), f64::INFINITY, &w).is_err());
    }

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.alpha, w.beta, w.gamma, w.delta, w.epsilon), (0.01, 1.0, 0.005, 0.01, 2.0));
        assert!(LossWeights { gamma: f64::NAN, ..w }.validate().is_err());
    }
}
