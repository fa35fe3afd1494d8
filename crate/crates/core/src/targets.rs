//! Target classifiers, the discriminator and the perceptual feature extractor.

use rand::Rng;
use raeg_autograd::{Binding, Float, ParamStore, Scope, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Architecture;
use crate::coupling::SpectralConv;
use crate::error::{RaegError, Result};
use crate::layers::{Conv, Linear};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Stacked 3×3 convs with max pooling.
    Plain,
    /// Identity-skip residual blocks.
    Residual,
    /// Densely connected blocks with 1×1 transitions and average pooling.
    Dense,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub name: String,
    pub arch: Arch,
    pub width: usize,
    pub num_classes: usize,
    #[serde(default = "three")]
    pub input_channels: usize,
}

fn three() -> usize {
    3
}

impl ClassifierConfig {
    pub fn new(name: &str, arch: Arch, width: usize, num_classes: usize) -> Self {
        Self { name: name.to_string(), arch, width, num_classes, input_channels: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(RaegError::config("num_classes", format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.width < 2 {
            return Err(RaegError::config("width", "classifier width must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Op {
    /// conv → ReLU
    Conv(Conv),
    /// ReLU(x + conv(ReLU(conv(x))))
    Residual(Conv, Conv),
    /// concat(x, ReLU(conv(x)))
    Dense(Conv),
    MaxPool,
    AvgPool,
}

#[derive(Clone, Debug)]
pub struct Classifier {
    config: ClassifierConfig,
    ops: Vec<Op>,
    head: Linear,
}

impl Classifier {
    /// Parameters are registered under `scope`.
    pub fn new<T: Float, R: Rng + ?Sized>(config: ClassifierConfig, scope: &mut Scope<'_, T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let w = config.width;
        let mut ops = Vec::new();
        let mut n = 0;
        let mut conv = |scope: &mut Scope<'_, T>, rng: &mut R, i: usize, o: usize, k: usize| {
            n += 1;
            Conv::new(&mut scope.sub(&format!("conv{n}")), i, o, k, 1, rng)
        };
        let features = match config.arch {
            Arch::Plain => {
                ops.push(Op::Conv(conv(scope, rng, config.input_channels, w, 3)));
                ops.push(Op::Conv(conv(scope, rng, w, w, 3)));
                ops.push(Op::MaxPool);
                ops.push(Op::Conv(conv(scope, rng, w, 2 * w, 3)));
                ops.push(Op::Conv(conv(scope, rng, 2 * w, 2 * w, 3)));
                ops.push(Op::MaxPool);
                ops.push(Op::Conv(conv(scope, rng, 2 * w, 4 * w, 3)));
                4 * w
            }
            Arch::Residual => {
                ops.push(Op::Conv(conv(scope, rng, config.input_channels, w, 3)));
                ops.push(Op::Residual(conv(scope, rng, w, w, 3), conv(scope, rng, w, w, 3)));
                ops.push(Op::MaxPool);
                ops.push(Op::Conv(conv(scope, rng, w, 2 * w, 3)));
                ops.push(Op::Residual(conv(scope, rng, 2 * w, 2 * w, 3), conv(scope, rng, 2 * w, 2 * w, 3)));
                ops.push(Op::MaxPool);
                ops.push(Op::Conv(conv(scope, rng, 2 * w, 4 * w, 3)));
                ops.push(Op::Residual(conv(scope, rng, 4 * w, 4 * w, 3), conv(scope, rng, 4 * w, 4 * w, 3)));
                4 * w
            }
            Arch::Dense => {
                let g = (w / 2).max(1);
                ops.push(Op::Conv(conv(scope, rng, config.input_channels, w, 3)));
                ops.push(Op::Dense(conv(scope, rng, w, g, 3)));
                ops.push(Op::Dense(conv(scope, rng, w + g, g, 3)));
                ops.push(Op::Conv(conv(scope, rng, w + 2 * g, w, 1)));
                ops.push(Op::AvgPool);
                ops.push(Op::Dense(conv(scope, rng, w, g, 3)));
                ops.push(Op::Dense(conv(scope, rng, w + g, g, 3)));
                ops.push(Op::Conv(conv(scope, rng, w + 2 * g, 2 * w, 1)));
                ops.push(Op::AvgPool);
                ops.push(Op::Dense(conv(scope, rng, 2 * w, w, 3)));
                ops.push(Op::Dense(conv(scope, rng, 3 * w, w, 3)));
                4 * w
            }
        };
        let head = Linear::new(&mut scope.sub("head"), features, config.num_classes, rng);
        Ok(Self { config, ops, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn name(&self) -> &str {
        &self.config.name
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match *shape {
            [_, c, h, w] if c == self.config.input_channels && h >= 4 && w >= 4 => Ok(()),
            _ => Err(RaegError::shape(format!(
                "classifier `{}` expects [B, {}, H, W] with H, W ≥ 4, got {shape:?}",
                self.config.name, self.config.input_channels
            ))),
        }
    }

    fn run<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>, stop_after_pools: Option<usize>) -> Var<'t, T> {
        let mut h = x.add_scalar(-0.5).scale(2.0);
        let mut pools = 0;
        for op in &self.ops {
            h = match op {
                Op::Conv(c) => c.forward(bind, h).relu(),
                Op::Residual(a, b) => h.add(b.forward(bind, a.forward(bind, h).relu())).relu(),
                Op::Dense(c) => Var::concat(&[h, c.forward(bind, h).relu()], 1),
                Op::MaxPool | Op::AvgPool => {
                    pools += 1;
                    if matches!(op, Op::MaxPool) {
                        h.max_pool2()
                    } else {
                        h.avg_pool2()
                    }
                }
            };
            if stop_after_pools == Some(pools) {
                return h;
            }
        }
        h
    }

    /// `[B, num_classes]` logits.
    pub fn logits<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        let h = self.run(bind, x, None);
        Ok(self.head.forward(bind, h.mean_trailing(2)))
    }

    /// Activation right after the `pools`-th pooling stage.
    pub fn features<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>, pools: usize) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        let available = self.ops.iter().filter(|o| matches!(o, Op::MaxPool | Op::AvgPool)).count();
        if pools == 0 || pools > available {
            return Err(RaegError::config("pools", format!("`{}` has {available} pooling stages, asked for {pools}", self.name())));
        }
        Ok(self.run(bind, x, Some(pools)))
    }
}

impl Architecture for Classifier {
    type Config = ClassifierConfig;
    const KIND: &'static str = "classifier";

    fn build<T: Float, R: Rng + ?Sized>(config: &ClassifierConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        let mut scope = store.scope(config.name.clone());
        Classifier::new(config.clone(), &mut scope, rng)
    }

    fn config(&self) -> &ClassifierConfig {
        &self.config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub members: Vec<ClassifierConfig>,
}

impl EnsembleConfig {
    /// One member of each architecture.
    pub fn heterogeneous(width: usize, num_classes: usize) -> Self {
        Self {
            members: vec![
                ClassifierConfig::new("plain", Arch::Plain, width, num_classes),
                ClassifierConfig::new("residual", Arch::Residual, width, num_classes),
                ClassifierConfig::new("dense", Arch::Dense, width, num_classes),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.members.first().ok_or_else(|| RaegError::config("targets.members", "ensemble needs at least one member"))?;
        for m in &self.members {
            m.validate()?;
            if m.num_classes != first.num_classes || m.input_channels != first.input_channels {
                return Err(RaegError::config("targets.members", format!("member `{}` disagrees on classes or channels", m.name)));
            }
        }
        let mut names: Vec<&str> = self.members.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(RaegError::config("targets.members", "member names must be unique"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    config: EnsembleConfig,
    members: Vec<Classifier>,
}

impl Ensemble {
    pub fn new<T: Float, R: Rng + ?Sized>(config: EnsembleConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let members = config
            .members
            .iter()
            .map(|m| Classifier::new(m.clone(), &mut store.scope(format!("targets.{}", m.name)), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config, members })
    }

    /// A one-member ensemble sharing `member`'s parameters.
    pub fn single(member: Classifier) -> Self {
        Self { config: EnsembleConfig { members: vec![member.config.clone()] }, members: vec![member] }
    }

    pub fn members(&self) -> &[Classifier] {
        &self.members
    }

    pub fn num_classes(&self) -> usize {
        self.config.members[0].num_classes
    }

    pub fn member_index(&self, name: &str) -> Option<usize> {
        self.members.iter().position(|m| m.name() == name)
    }

    /// Same parameters, restricted to the named members.
    pub fn subset(&self, names: &[&str]) -> Result<Self> {
        let members: Vec<Classifier> = names
            .iter()
            .map(|n| {
                self.member_index(n)
                    .map(|i| self.members[i].clone())
                    .ok_or_else(|| RaegError::config("targets", format!("no member named `{n}`")))
            })
            .collect::<Result<_>>()?;
        let config = EnsembleConfig { members: members.iter().map(|m| m.config.clone()).collect() };
        config.validate()?;
        Ok(Self { config, members })
    }

    /// Per-member logits. Bind with `trainable = false` to keep members frozen.
    pub fn logits<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
        self.members.iter().map(|m| m.logits(bind, x)).collect()
    }

    /// Evaluation-mode logits for each member, batched by `batch`.
    pub fn logits_tensor<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>, batch: usize) -> Result<Vec<Tensor<T>>> {
        let n = x.dim(0);
        let mut per_member: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.members.len()];
        for start in (0..n).step_by(batch.max(1)) {
            let len = batch.max(1).min(n - start);
            let tape = Tape::new();
            let bind = Binding::new(&tape, store, false);
            let xb = tape.constant(x.narrow(0, start, len));
            for (out, m) in per_member.iter_mut().zip(&self.members) {
                out.push(m.logits(&bind, xb)?.value());
            }
        }
        Ok(per_member.iter().map(|parts| Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0)).collect())
    }

    pub fn accuracy<T: Float>(&self, store: &ParamStore<T>, x: &Tensor<T>, labels: &[usize], batch: usize) -> Result<AccuracyReport> {
        let logits = self.logits_tensor(store, x, batch)?;
        let per_member = self
            .members
            .iter()
            .zip(&logits)
            .map(|(m, l)| Ok((m.name().to_string(), top1_accuracy(l, labels)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(AccuracyReport::new(per_member))
    }
}

impl Architecture for Ensemble {
    type Config = EnsembleConfig;
    const KIND: &'static str = "ensemble";

    fn build<T: Float, R: Rng + ?Sized>(config: &EnsembleConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Ensemble::new(config.clone(), store, rng)
    }

    fn config(&self) -> &EnsembleConfig {
        &self.config
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub per_member: Vec<(String, f64)>,
    pub mean: f64,
}

impl AccuracyReport {
    pub fn new(per_member: Vec<(String, f64)>) -> Self {
        let mean = per_member.iter().map(|p| p.1).sum::<f64>() / per_member.len().max(1) as f64;
        Self { per_member, mean }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.per_member.iter().find(|p| p.0 == name).map(|p| p.1)
    }
}

/// Fraction of rows whose argmax equals the label (first maximum wins ties).
pub fn top1_accuracy<T: Float>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let &[n, k] = logits.shape() else {
        return Err(RaegError::shape(format!("logits must be [B, K], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(RaegError::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(RaegError::Label { label, classes: k });
    }
    let correct = logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &l)| {
            let best = row.iter().enumerate().fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
            best == l
        })
        .count();
    Ok(correct as f64 / n.max(1) as f64)
}

/// Shallow activations of one ensemble member.
#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    pub member: Classifier,
    pub pools: usize,
}

impl FeatureExtractor {
    pub const POOLS: usize = 2;

    pub fn new(member: Classifier) -> Self {
        Self { member, pools: Self::POOLS }
    }

    /// Bind with `trainable = false`; gradients still reach `x`.
    pub fn features<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.member.features(bind, x, self.pools)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width: usize,
    pub input_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 16, input_channels: 3 }
    }
}

/// Four strided spectral-normalized convs; patch logits are averaged.
#[derive(Clone, Debug)]
pub struct Discriminator {
    config: DiscriminatorConfig,
    convs: Vec<SpectralConv>,
}

impl Discriminator {
    pub fn new<T: Float, R: Rng + ?Sized>(config: DiscriminatorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        if config.width < 1 {
            return Err(RaegError::config("discriminator.width", "must be at least 1"));
        }
        let w = config.width;
        let plan = [(config.input_channels, w, 2), (w, 2 * w, 2), (2 * w, 4 * w, 2), (4 * w, 1, 1)];
        let mut scope = store.scope("disc");
        let convs = plan
            .iter()
            .enumerate()
            .map(|(i, &(ic, oc, s))| SpectralConv::new(&mut scope.sub(&format!("conv{}", i + 1)), ic, oc, 3, s, 1, rng))
            .collect();
        Ok(Self { config, convs })
    }

    pub fn power_iteration<T: Float>(&self, store: &mut ParamStore<T>) {
        self.convs.iter().for_each(|c| c.power_iteration(store));
    }

    /// One logit per image, `[B]`.
    pub fn logits<'t, T: Float>(&self, bind: &Binding<'t, '_, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.config.input_channels || shape[2] < 8 || shape[3] < 8 {
            return Err(RaegError::shape(format!("discriminator expects [B, {}, ≥8, ≥8], got {shape:?}", self.config.input_channels)));
        }
        let mut h = x.add_scalar(-0.5).scale(2.0);
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            h = c.forward(bind, h);
            if i < last {
                h = h.leaky_relu(0.2);
            }
        }
        Ok(h.mean_trailing(3))
    }
}

impl Architecture for Discriminator {
    type Config = DiscriminatorConfig;
    const KIND: &'static str = "discriminator";

    fn build<T: Float, R: Rng + ?Sized>(config: &DiscriminatorConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        Discriminator::new(config.clone(), store, rng)
    }

    fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }
}
