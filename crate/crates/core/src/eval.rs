//! Evaluation protocols: protection/recovery, robustness to real attacks,
//! pirate retraining and ablations.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raeg_autograd::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::battery::{real_attack_battery, NO_ATTACK};
use crate::config::{PirateConfig, RunConfig};
use crate::data::{Dataset, Split};
use crate::error::{RaegError, Result};
use crate::generator::{quantize, Generator};
use crate::metrics::{psnr_per_image, ssim_per_image, Stat};
use crate::targets::{top1_accuracy, Classifier, ClassifierConfig, Ensemble};
use crate::training::{holdout_split, store_digest, train, train_classifier, ClassifierTraining, Targets};

/// Which images a condition scores.
pub const ORIGINAL: &str = "original";
pub const PROTECTED: &str = "protected";
pub const RECOVERED: &str = "recovered";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    /// `original`, `recovered`, or `protected` (optionally after `attack`).
    pub images: String,
    pub attack: String,
    pub classifier: String,
    /// Whether the classifier was attacked during generator training.
    pub victim: bool,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetadata {
    /// SHA-256 of the generator parameters.
    pub checkpoint: String,
    pub dataset: String,
    pub seed: u64,
    pub images: usize,
    pub victims: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metadata: EvalMetadata,
    pub conditions: Vec<Condition>,
    /// Victim-mean accuracies.
    pub a_ori: f64,
    pub a_prt: f64,
    pub a_rev: f64,
    pub psnr_prt: Stat,
    pub psnr_rev: Stat,
    pub ssim_prt: Stat,
    pub ssim_rev: Stat,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn accuracy(&self, images: &str, attack: &str, classifier: &str) -> Option<f64> {
        self.conditions.iter().find(|c| c.images == images && c.attack == attack && c.classifier == classifier).map(|c| c.accuracy)
    }

    /// Mean accuracy over the named classifiers for one condition.
    pub fn mean_accuracy(&self, images: &str, attack: &str, classifiers: &[String]) -> Option<f64> {
        let v: Vec<f64> = classifiers.iter().filter_map(|c| self.accuracy(images, attack, c)).collect();
        (!v.is_empty() && v.len() == classifiers.len()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Real attacks applied to the protected images, in battery order (without `none`).
    pub fn attacks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in &self.conditions {
            if c.images == PROTECTED && c.attack != NO_ATTACK && !out.contains(&c.attack) {
                out.push(c.attack.clone());
            }
        }
        out
    }

    pub fn classifiers(&self) -> Vec<(String, bool)> {
        let mut out: Vec<(String, bool)> = Vec::new();
        for c in &self.conditions {
            if !out.iter().any(|o| o.0 == c.classifier) {
                out.push((c.classifier.clone(), c.victim));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Flat `images,attack,classifier,victim,metric,value` rows.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["images", "attack", "classifier", "victim", "metric", "value"])?;
        for c in &self.conditions {
            w.write_record([&c.images, &c.attack, &c.classifier, &c.victim.to_string(), "accuracy", &c.accuracy.to_string()])?;
        }
        for (name, s) in [("psnr_prt", &self.psnr_prt), ("psnr_rev", &self.psnr_rev), ("ssim_prt", &self.ssim_prt), ("ssim_rev", &self.ssim_rev)] {
            for (stat, v) in [("mean", s.mean), ("std", s.std), ("count", s.count as f64), ("infinite", s.infinite as f64)] {
                w.write_record(["", "", "", "", &format!("{name}.{stat}"), &v.to_string()])?;
            }
        }
        for (name, v) in [("a_ori", self.a_ori), ("a_prt", self.a_prt), ("a_rev", self.a_rev)] {
            w.write_record(["", "", "", "", name, &v.to_string()])?;
        }
        Ok(String::from_utf8(w.into_inner().map_err(|e| RaegError::Io(e.into_error()))?).expect("utf-8 csv"))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json())?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        Ok(())
    }

    /// Accuracy, PSNR and SSIM columns for protected and recovered images.
    pub fn format_quality_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:>8} {:>8} {:>8} {:>10} {:>10} {:>8} {:>8}", "A_ori", "A_prt", "A_rev", "P_prt", "P_rev", "S_prt", "S_rev");
        let _ = writeln!(
            s,
            "{:>8.3} {:>8.3} {:>8.3} {:>10} {:>10} {:>8.3} {:>8.3}",
            self.a_ori,
            self.a_prt,
            self.a_rev,
            fmt_db(self.psnr_prt.mean),
            fmt_db(self.psnr_rev.mean),
            self.ssim_prt.mean,
            self.ssim_rev.mean
        );
        s
    }

    /// Accuracy of every classifier on protected images under every real attack.
    pub fn format_robustness_table(&self) -> String {
        let mut s = String::new();
        let attacks: Vec<String> = std::iter::once(NO_ATTACK.to_string()).chain(self.attacks()).collect();
        let _ = write!(s, "{:<22}{:>8}", "classifier", "clean");
        for a in &attacks {
            let _ = write!(s, "{a:>9}");
        }
        s.push('\n');
        for (c, victim) in self.classifiers() {
            let label = format!("{c} ({})", if victim { "victim" } else { "held-out" });
            let _ = write!(s, "{label:<22}{:>8.3}", self.accuracy(ORIGINAL, NO_ATTACK, &c).unwrap_or(f64::NAN));
            for a in &attacks {
                let _ = write!(s, "{:>9.3}", self.accuracy(PROTECTED, a, &c).unwrap_or(f64::NAN));
            }
            s.push('\n');
        }
        s
    }
}

fn fmt_db(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.3}")
    } else {
        "inf".into()
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Counts correct predictions per (images, attack, classifier) across batches.
struct Tally {
    keys: Vec<(String, String, usize)>,
    correct: Vec<f64>,
    total: usize,
}

impl Tally {
    fn add(&mut self, images: &str, attack: &str, member: usize, acc: f64, n: usize) {
        let key = (images.to_string(), attack.to_string(), member);
        let hits = (acc * n as f64).round();
        match self.keys.iter().position(|k| *k == key) {
            Some(i) => self.correct[i] += hits,
            None => {
                self.keys.push(key);
                self.correct.push(hits);
            }
        }
    }
}

/// Evaluate protection and recovery on `test`; with `battery`, also score every real attack.
pub fn evaluate_with(
    gen: &Generator,
    gstore: &ParamStore<f32>,
    targets: &Targets,
    test: &Split,
    cfg: &RunConfig,
    battery: bool,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(RaegError::Dataset("empty test split".into()));
    }
    let victims = cfg.targets.victim_names();
    let members: &Ensemble = &targets.ensemble;
    let mut tally = Tally { keys: Vec::new(), correct: Vec::new(), total: 0 };
    let (mut p_prt, mut p_rev, mut s_prt, mut s_rev) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut warnings = Vec::new();
    let bs = cfg.eval.batch_size.max(1);
    let score = |tally: &mut Tally, images: &str, attack: &str, x: &Tensor<f32>, labels: &[usize]| -> Result<()> {
        for (i, l) in members.logits_tensor(&targets.store, x, bs)?.iter().enumerate() {
            tally.add(images, attack, i, top1_accuracy(l, labels)?, labels.len());
        }
        Ok(())
    };
    for (x, labels) in test.batches(bs, None) {
        let prt = quantize(&gen.protect_tensor(gstore, &x)?);
        let rev = quantize(&gen.recover_tensor(gstore, &prt)?);
        p_prt.extend(psnr_per_image(&x, &prt)?);
        p_rev.extend(psnr_per_image(&x, &rev)?);
        s_prt.extend(ssim_per_image(&x, &prt)?);
        s_rev.extend(ssim_per_image(&x, &rev)?);
        score(&mut tally, ORIGINAL, NO_ATTACK, &x, &labels)?;
        score(&mut tally, RECOVERED, NO_ATTACK, &rev, &labels)?;
        if battery {
            let out = real_attack_battery(&prt, &cfg.eval.battery)?;
            for w in out.warnings {
                if !warnings.contains(&w) {
                    warnings.push(w);
                }
            }
            for (name, t) in &out.entries {
                score(&mut tally, PROTECTED, name, t, &labels)?;
            }
        } else {
            score(&mut tally, PROTECTED, NO_ATTACK, &prt, &labels)?;
        }
        tally.total += labels.len();
    }
    let conditions: Vec<Condition> = tally
        .keys
        .iter()
        .zip(&tally.correct)
        .map(|((images, attack, m), c)| {
            let name = members.members()[*m].name().to_string();
            Condition {
                images: images.clone(),
                attack: attack.clone(),
                victim: victims.contains(&name),
                classifier: name,
                accuracy: c / tally.total as f64,
            }
        })
        .collect();
    let mut report = EvalReport {
        metadata: EvalMetadata {
            checkpoint: store_digest(gstore),
            dataset: test.paths.first().and_then(|p| p.parent()?.parent()).map(|p| p.display().to_string()).unwrap_or_default(),
            seed: cfg.eval.battery.seed,
            images: test.len(),
            victims: victims.clone(),
        },
        conditions,
        psnr_prt: Stat::of(&p_prt),
        psnr_rev: Stat::of(&p_rev),
        ssim_prt: Stat::of(&s_prt),
        ssim_rev: Stat::of(&s_rev),
        warnings,
        ..EvalReport::default()
    };
    let m = |r: &EvalReport, images: &str| r.mean_accuracy(images, NO_ATTACK, &victims).unwrap_or(f64::NAN);
    report.a_ori = m(&report, ORIGINAL);
    report.a_prt = m(&report, PROTECTED);
    report.a_rev = m(&report, RECOVERED);
    Ok(report)
}

/// Accuracy on original, protected and recovered images plus their PSNR / SSIM.
pub fn evaluate(gen: &Generator, gstore: &ParamStore<f32>, targets: &Targets, test: &Split, cfg: &RunConfig) -> Result<EvalReport> {
    evaluate_with(gen, gstore, targets, test, cfg, false)
}

/// [`evaluate`] plus accuracy of every member (victims and held-out) on each real attack of the protected images.
pub fn evaluate_robustness(gen: &Generator, gstore: &ParamStore<f32>, targets: &Targets, test: &Split, cfg: &RunConfig) -> Result<EvalReport> {
    evaluate_with(gen, gstore, targets, test, cfg, true)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PirateVariant {
    Clean,
    Protected,
    /// Protected images after the configured real defense.
    ProtectedDefense,
    Recovered,
}

pub const PIRATE_VARIANTS: [PirateVariant; 4] =
    [PirateVariant::Clean, PirateVariant::Protected, PirateVariant::ProtectedDefense, PirateVariant::Recovered];

impl std::fmt::Display for PirateVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = serde_json::to_value(self).map_err(|_| std::fmt::Error)?;
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

impl std::str::FromStr for PirateVariant {
    type Err = RaegError;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
            .map_err(|_| RaegError::config("variant", format!("unknown pirate variant `{s}` (clean, protected, protected-defense, recovered)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PirateResult {
    pub variant: PirateVariant,
    pub defense: Option<String>,
    pub epochs: usize,
    /// Top-1 on the clean test split.
    pub accuracy: f64,
}

/// The training images a pirate would hold under `variant`.
pub fn pirate_images(gen: &Generator, gstore: &ParamStore<f32>, variant: PirateVariant, train: &Split, cfg: &RunConfig) -> Result<(Tensor<f32>, Option<String>)> {
    let bs = cfg.eval.batch_size.max(1);
    let mut parts = Vec::new();
    let defense = (variant == PirateVariant::ProtectedDefense).then(|| cfg.eval.pirate.defense.clone());
    for (x, _) in train.batches(bs, None) {
        let out = match variant {
            PirateVariant::Clean => x,
            PirateVariant::Protected => quantize(&gen.protect_tensor(gstore, &x)?),
            PirateVariant::Recovered => quantize(&gen.recover_tensor(gstore, &quantize(&gen.protect_tensor(gstore, &x)?))?),
            PirateVariant::ProtectedDefense => {
                let name = defense.as_deref().expect("set above");
                let prt = quantize(&gen.protect_tensor(gstore, &x)?);
                let out = real_attack_battery(&prt, &cfg.eval.battery)?;
                out.entries
                    .into_iter()
                    .find(|e| e.0 == name)
                    .map(|e| e.1)
                    .ok_or_else(|| RaegError::config("eval.pirate.defense", format!("battery has no attack `{name}`")))?
            }
        };
        parts.push(out);
    }
    Ok((Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0), defense))
}

/// Train a fresh classifier on the variant's training images and score it on clean test images.
pub fn retrain_pirate(
    gen: &Generator,
    gstore: &ParamStore<f32>,
    variant: PirateVariant,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<PirateResult> {
    let p: &PirateConfig = &cfg.eval.pirate;
    let (images, defense) = pirate_images(gen, gstore, variant, &dataset.train, cfg)?;
    let train = dataset.train.with_images(images)?;
    let (fit, val) = holdout_split(&train);
    let config = ClassifierConfig { name: "pirate".into(), arch: p.arch, width: p.width, num_classes: dataset.num_classes(), input_channels: 3 };
    let mut store = ParamStore::new();
    let seed = cfg.optimizer.seed.wrapping_add(0x9172);
    let model = Classifier::new(config, &mut store.scope("pirate"), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let t = ClassifierTraining { lr: p.lr, batch_size: p.batch_size, max_epochs: p.max_epochs, patience: p.patience, seed };
    let history = train_classifier(&model, &mut store, "pirate.", &fit, &val, &t)?;
    let logits = Ensemble::single(model).logits_tensor(&store, &dataset.test.images, cfg.eval.batch_size)?;
    Ok(PirateResult { variant, defense, epochs: history.len(), accuracy: top1_accuracy(&logits[0], &dataset.test.labels)? })
}

pub fn format_pirate_table(results: &[PirateResult]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28}{:>8}{:>10}", "training data", "epochs", "accuracy");
    for r in results {
        let label = match &r.defense {
            Some(d) => format!("{} ({d})", r.variant),
            None => r.variant.to_string(),
        };
        let _ = writeln!(s, "{label:<28}{:>8}{:>10.3}", r.epochs, r.accuracy);
    }
    s
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "toggle", content = "member", rename_all = "snake_case")]
pub enum Toggle {
    NoDiscriminator,
    NoPerceptual,
    SingleVictim(String),
}

impl Toggle {
    pub fn label(&self) -> String {
        match self {
            Toggle::NoDiscriminator => "w/o discriminator".into(),
            Toggle::NoPerceptual => "w/o perceptual loss".into(),
            Toggle::SingleVictim(m) => format!("one victim ({m})"),
        }
    }

    pub fn slug(&self) -> String {
        match self {
            Toggle::NoDiscriminator => "no_discriminator".into(),
            Toggle::NoPerceptual => "no_perceptual".into(),
            Toggle::SingleVictim(m) => format!("single_victim_{m}"),
        }
    }

    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        match self {
            Toggle::NoDiscriminator => c.losses.delta = 0.0,
            Toggle::NoPerceptual => c.losses.alpha = 0.0,
            Toggle::SingleVictim(m) => c.targets.victims = Some(vec![m.clone()]),
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub p_prt: f64,
    pub p_rev: f64,
    /// Mean accuracy on protected images without attack.
    pub a_prt: f64,
    /// Mean accuracy on protected images across the real attacks.
    pub a_def: f64,
}

impl AblationRow {
    /// Scores are averaged over `members`, so rows trained against different victims stay comparable.
    pub fn from_report(label: String, r: &EvalReport, members: &[String]) -> Self {
        let a_def = mean(&r.attacks().iter().filter_map(|a| r.mean_accuracy(PROTECTED, a, members)).collect::<Vec<_>>());
        Self {
            label,
            p_prt: r.psnr_prt.mean,
            p_rev: r.psnr_rev.mean,
            a_prt: r.mean_accuracy(PROTECTED, NO_ATTACK, members).unwrap_or(f64::NAN),
            a_def,
        }
    }
}

pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28}{:>9}{:>9}{:>9}{:>9}", "setting", "P_prt", "P_rev", "A_prt", "A_def");
    for r in rows {
        let _ = writeln!(s, "{:<28}{:>9}{:>9}{:>9.3}{:>9.3}", r.label, fmt_db(r.p_prt), fmt_db(r.p_rev), r.a_prt, r.a_def);
    }
    s
}

/// Train the full configuration and each toggled variant under `out/<slug>`, then score them on `test`.
pub fn ablation_suite(cfg: &RunConfig, dataset: &Dataset, targets: &Targets, test: &Split, toggles: &[Toggle], out: &Path) -> Result<Vec<AblationRow>> {
    let members = cfg.targets.victim_names();
    let mut rows = Vec::new();
    let runs = std::iter::once(("full implementation".to_string(), "full".to_string(), cfg.clone()))
        .chain(toggles.iter().map(|t| (t.label(), t.slug(), t.apply(cfg))));
    for (label, slug, run_cfg) in runs {
        let outcome = train(&run_cfg, dataset, targets, &out.join(&slug), true)?;
        let report = evaluate_robustness(&outcome.trainer.gen, &outcome.trainer.gstore, targets, test, &run_cfg)?;
        report.write(&out.join(&slug), "report")?;
        rows.push(AblationRow::from_report(label, &report, &members));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> EvalReport {
        let cond = |images: &str, attack: &str, classifier: &str, accuracy: f64| Condition {
            images: images.into(),
            attack: attack.into(),
            classifier: classifier.into(),
            victim: classifier != "h",
            accuracy,
        };
        EvalReport {
            conditions: vec![
                cond(ORIGINAL, NO_ATTACK, "a", 0.9),
                cond(ORIGINAL, NO_ATTACK, "h", 0.8),
                cond(PROTECTED, NO_ATTACK, "a", 0.1),
                cond(PROTECTED, NO_ATTACK, "h", 0.5),
                cond(PROTECTED, "jpeg50", "a", 0.2),
                cond(PROTECTED, "jpeg50", "h", 0.6),
                cond(PROTECTED, "median", "a", 0.4),
                cond(PROTECTED, "median", "h", 0.7),
            ],
            psnr_rev: Stat::of(&[f64::INFINITY]),
            psnr_prt: Stat::of(&[27.0, 29.0]),
            ..EvalReport::default()
        }
    }

    #[test]
    fn json_roundtrip_is_lossless() {
        let r = report();
        assert_eq!(EvalReport::from_json(&r.to_json()).unwrap(), r);
        assert!(r.to_csv().unwrap().lines().count() > r.conditions.len());
    }

    #[test]
    fn ablation_row_averages_members_and_attacks() {
        let r = report();
        assert_eq!(r.attacks(), ["jpeg50", "median"]);
        let row = AblationRow::from_report("x".into(), &r, &["a".to_string()]);
        assert!((row.a_def - 0.3).abs() < 1e-12);
        assert_eq!(row.a_prt, 0.1);
        assert_eq!(row.p_prt, 28.0);
        let both = AblationRow::from_report("x".into(), &r, &["a".to_string(), "h".to_string()]);
        assert!((both.a_def - 0.475).abs() < 1e-12);
        let table = format_ablation_table(&[row]);
        assert!(table.contains("0.300"));
    }

    #[test]
    fn robustness_table_labels_held_out_members() {
        let t = report().format_robustness_table();
        assert!(t.contains("h (held-out)") && t.contains("a (victim)"), "{t}");
    }

    #[test]
    fn pirate_variant_names() {
        assert_eq!("protected-defense".parse::<PirateVariant>().unwrap(), PirateVariant::ProtectedDefense);
        assert_eq!(PirateVariant::Recovered.to_string(), "recovered");
        assert!("stolen".parse::<PirateVariant>().is_err());
    }

    #[test]
    fn toggles_change_only_their_setting() {
        let cfg = RunConfig::desk();
        assert_eq!(Toggle::NoDiscriminator.apply(&cfg).losses.delta, 0.0);
        assert_eq!(Toggle::NoPerceptual.apply(&cfg).losses.alpha, 0.0);
        let single = Toggle::SingleVictim("residual".into()).apply(&cfg);
        assert_eq!(single.targets.victim_names(), ["residual"]);
        assert_eq!(single.model, cfg.model);
    }
}
