//! The run configuration file.
//!
//! A JSON object whose sections `model`, `losses`, `attacks`, `optimizer`,
//! `data` and `logging` must all be present (each may be `{}` to take the
//! defaults). `targets`, `discriminator`, `controller` and `eval` are optional.
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::battery::BatteryConfig;
use crate::defense_sim::AttackConfig;
use crate::error::{RaegError, Result};
use crate::generator::GeneratorConfig;
use crate::losses::LossWeights;
use crate::targets::{Arch, ClassifierConfig, DiscriminatorConfig, EnsembleConfig};

pub const REQUIRED_SECTIONS: [&str; 6] = ["model", "losses", "attacks", "optimizer", "data", "logging"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Discriminator learning rate.
    pub disc_lr: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 8, epochs: 10, disc_lr: 1e-4, seed: 0 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("lr", self.lr), ("disc_lr", self.disc_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RaegError::config(format!("optimizer.{f}"), format!("must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RaegError::config("optimizer.beta1", "Adam betas must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(RaegError::config("optimizer.batch_size", "must be at least 1"));
        }
        Ok(())
    }

    pub fn adam(&self, lr: f64) -> raeg_autograd::AdamConfig {
        raeg_autograd::AdamConfig { lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Square side images are resized to.
    pub image_size: usize,
    /// Seed of the train/test split.
    pub split_seed: u64,
    /// Evaluate on at most this many test images (0 = all).
    pub eval_limit: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: 64, split_seed: 0, eval_limit: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoggingConfig {
    /// Write a loss-curve row every this many steps.
    pub log_every: usize,
    /// Save checkpoints every this many epochs (the final epoch is always saved).
    pub checkpoint_every: usize,
    /// Compute per-term gradient norms on every this many steps (0 = never).
    pub grad_norm_every: usize,
}

impl Default for LoggingConfig {
    fn default() -> Self {
        Self { log_every: 10, checkpoint_every: 1, grad_norm_every: 0 }
    }
}

/// How target classifiers are pretrained and which of them the generator attacks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TargetsConfig {
    pub members: Vec<ClassifierConfig>,
    /// Members trained alongside the others but never attacked during generator training.
    pub held_out: Vec<String>,
    /// Attack only these members (default: every member not held out).
    pub victims: Option<Vec<String>>,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without validation improvement.
    pub patience: usize,
}

impl Default for TargetsConfig {
    fn default() -> Self {
        let mut members = EnsembleConfig::heterogeneous(16, 10).members;
        members.push(ClassifierConfig::new("holdout", Arch::Residual, 12, 10));
        Self { members, held_out: vec!["holdout".into()], victims: None, lr: 1e-3, batch_size: 32, max_epochs: 30, patience: 4 }
    }
}

impl TargetsConfig {
    pub fn ensemble(&self) -> EnsembleConfig {
        EnsembleConfig { members: self.members.clone() }
    }

    pub fn victim_names(&self) -> Vec<String> {
        match &self.victims {
            Some(v) => v.clone(),
            None => self.members.iter().map(|m| m.name.clone()).filter(|n| !self.held_out.contains(n)).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ensemble().validate()?;
        let known = |n: &String| self.members.iter().any(|m| &m.name == n);
        if let Some(n) = self.held_out.iter().chain(self.victims.iter().flatten()).find(|n| !known(n)) {
            return Err(RaegError::config("targets", format!("unknown member `{n}`")));
        }
        if self.victim_names().is_empty() {
            return Err(RaegError::config("targets.victims", "no member left to attack"));
        }
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(RaegError::config("targets", "batch_size and lr must be positive"));
        }
        Ok(())
    }
}

/// Holds the protected-image PSNR near a target, by adapting γ and/or penalising the shortfall.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    pub enabled: bool,
    pub target_psnr: f64,
    /// Half-width of the dead band around the target, in dB.
    pub tolerance: f64,
    /// Multiplicative step applied to the weight per training step.
    pub rate: f64,
    pub min_gamma: f64,
    pub max_gamma: f64,
    /// Weight of the squared per-image PSNR shortfall below `target_psnr` (dB²). Applies even when `enabled` is false.
    pub budget_weight: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self { enabled: false, target_psnr: 28.0, tolerance: 1.0, rate: 0.02, min_gamma: 1e-5, max_gamma: 10.0, budget_weight: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PirateConfig {
    pub arch: Arch,
    pub width: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Battery entry applied to protected images for the `protected_defense` variant.
    pub defense: String,
}

impl Default for PirateConfig {
    fn default() -> Self {
        Self { arch: Arch::Plain, width: 16, lr: 1e-3, batch_size: 32, max_epochs: 30, patience: 4, defense: "median".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub batch_size: usize,
    pub battery: BatteryConfig,
    pub pirate: PirateConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { batch_size: 32, battery: BatteryConfig::default(), pirate: PirateConfig::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: GeneratorConfig,
    pub losses: LossWeights,
    pub attacks: AttackConfig,
    pub optimizer: OptimizerConfig,
    pub data: DataConfig,
    pub logging: LoggingConfig,
    #[serde(default)]
    pub targets: TargetsConfig,
    #[serde(default)]
    pub discriminator: DiscriminatorConfig,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(map) = &value else {
            return Err(RaegError::config("<root>", "configuration must be a JSON object"));
        };
        let missing: Vec<&str> = REQUIRED_SECTIONS.iter().copied().filter(|s| !map.contains_key(*s)).collect();
        if !missing.is_empty() {
            return Err(RaegError::config(missing.join(", "), "missing configuration section(s)"));
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| RaegError::config("<config>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| RaegError::config("<config>", e.to_string()))?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RaegError::config("--config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.losses.validate()?;
        self.attacks.validate()?;
        self.optimizer.validate()?;
        self.targets.validate()?;
        let m = self.model.size_multiple();
        if self.data.image_size == 0 || self.data.image_size % m != 0 {
            return Err(RaegError::config("data.image_size", format!("{} is not a positive multiple of {m}", self.data.image_size)));
        }
        if self.data.image_size < 11 {
            return Err(RaegError::config("data.image_size", "SSIM needs images of at least 11×11"));
        }
        if self.targets.members.iter().any(|c| c.num_classes != self.targets.members[0].num_classes) {
            return Err(RaegError::config("targets.members", "members disagree on num_classes"));
        }
        Ok(())
    }

    /// Scaled-down settings that train on one CPU core in well under an hour.
    pub fn desk() -> Self {
        let mut targets = TargetsConfig::default();
        for m in &mut targets.members {
            // dense blocks underfit at width 8 within the epoch budget
            m.width = if m.arch == Arch::Dense { 12 } else { 8 };
        }
        targets.max_epochs = 20;
        Self {
            model: GeneratorConfig { scales: 2, blocks_per_scale: 2, subnet_width: 16, ..GeneratorConfig::default() },
            data: DataConfig { image_size: 32, ..DataConfig::default() },
            optimizer: OptimizerConfig { lr: 1e-3, disc_lr: 1e-3, epochs: 3, ..OptimizerConfig::default() },
            losses: LossWeights { gamma: 0.25, attack_temperature: 10.0, attack_ce_cap: Some(4.0), ..LossWeights::default() },
            // the L1 protection term alone has no interior optimum against the attack term; the budget supplies one
            controller: ControllerConfig { budget_weight: 1.0, ..ControllerConfig::default() },
            discriminator: DiscriminatorConfig { width: 8, ..DiscriminatorConfig::default() },
            eval: EvalConfig { pirate: PirateConfig { width: 8, max_epochs: 12, ..PirateConfig::default() }, ..EvalConfig::default() },
            targets,
            ..Self::default()
        }
    }
}
