//! Target pretraining and the adversarial generator training loop.

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raeg_autograd::{Adam, Binding, ParamStore, Tape, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::{default_path, first_difference, load_model, save_model, Architecture};
use crate::config::{RunConfig, TargetsConfig};
use crate::data::{Dataset, Split};
use crate::defense_sim::{apply_attack, apply_attack_per_sample, sample_attack, AttackSpec};
use crate::error::{RaegError, Result};
use crate::generator::{quantize_ste, Generator};
use crate::losses::{loss_budget, loss_cls, loss_dis, loss_gan, loss_prt, loss_rev, loss_total, LossReport, LossTerms, LossWeights};
use crate::metrics::psnr_per_image;
use crate::targets::{AccuracyReport, Classifier, ClassifierConfig, Discriminator, Ensemble, FeatureExtractor};

pub const CURVES_FILE: &str = "curves.csv";
/// Protected-image PSNR above this counts as this for the controller.
const PSNR_CAP: f64 = 100.0;

fn numeric(term: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(RaegError::Numeric { term: term.to_string(), detail: format!("loss evaluated to {v}") })
    }
}

/// SHA-256 over every tensor name and value, in store order.
pub fn store_digest(store: &ParamStore<f32>) -> String {
    let mut h = Sha256::new();
    for (_, name, t, _) in store.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn epoch_rng(seed: u64, epoch: usize, salt: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ salt ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTraining {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_accuracy: f64,
}

/// Every tenth image of a split as validation, the rest for fitting.
pub fn holdout_split(split: &Split) -> (Split, Split) {
    let (val, fit): (Vec<usize>, Vec<usize>) = (0..split.len()).partition(|i| i % 10 == 0);
    (split.select(&fit), split.select(&val))
}

/// Adam on cross-entropy with early stopping; the best-validation parameters are kept.
///
/// Only parameters whose names start with `prefix` are updated.
pub fn train_classifier(
    model: &Classifier,
    store: &mut ParamStore<f32>,
    prefix: &str,
    fit: &Split,
    val: &Split,
    t: &ClassifierTraining,
) -> Result<Vec<EpochRecord>> {
    if fit.is_empty() || val.is_empty() {
        return Err(RaegError::Dataset("classifier training needs non-empty fit and validation sets".into()));
    }
    let owned: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with(prefix)).collect();
    let mut adam = Adam::new(raeg_autograd::AdamConfig { lr: t.lr, ..Default::default() });
    let snapshot = |store: &ParamStore<f32>| owned.iter().map(|&id| store.get(id).clone()).collect::<Vec<_>>();
    let val_acc = |store: &ParamStore<f32>| -> Result<f64> {
        let logits = Ensemble::single(model.clone()).logits_tensor(store, &val.images, 64)?;
        crate::targets::top1_accuracy(&logits[0], &val.labels)
    };
    let mut best = (val_acc(store)?, snapshot(store));
    let mut history = Vec::new();
    let mut stale = 0;
    for epoch in 0..t.max_epochs {
        let mut rng = epoch_rng(t.seed, epoch, 0xC1A5);
        let (mut total, mut n) = (0.0, 0);
        for (x, y) in fit.batches(t.batch_size, Some(&mut rng)) {
            let tape = Tape::new();
            let bind = Binding::new(&tape, &*store, true);
            let loss = model.logits(&bind, tape.constant(x))?.cross_entropy(&y);
            let value = numeric(&format!("cross-entropy of `{}`", model.name()), loss.item() as f64)?;
            let grads = tape.backward(loss);
            let grads: Vec<_> = bind.gradients(&grads).into_iter().filter(|(id, _)| owned.contains(id)).collect();
            drop(bind);
            adam.step(store, &grads);
            total += value * y.len() as f64;
            n += y.len();
        }
        let acc = val_acc(store)?;
        history.push(EpochRecord { epoch, loss: total / n as f64, val_accuracy: acc });
        if acc > best.0 {
            best = (acc, snapshot(store));
            stale = 0;
        } else {
            stale += 1;
            if stale >= t.patience {
                break;
            }
        }
    }
    for (&id, v) in owned.iter().zip(best.1) {
        store.set(id, v)?;
    }
    Ok(history)
}

/// The pretrained (then frozen) classifiers.
pub struct Targets {
    pub ensemble: Ensemble,
    pub store: ParamStore<f32>,
    pub test_accuracy: AccuracyReport,
    pub val_accuracy: AccuracyReport,
    /// Strongest attacked member by validation accuracy; supplies perceptual features.
    pub feature_member: String,
}

impl Targets {
    pub fn path(dir: &Path) -> PathBuf {
        default_path(dir, Ensemble::KIND)
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = Self::path(dir);
        let metadata = json!({
            "test_accuracy": self.test_accuracy,
            "val_accuracy": self.val_accuracy,
            "feature_member": self.feature_member,
        });
        save_model(&path, &self.ensemble, &self.store, metadata, None)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_model::<Ensemble, f32>(path, None)?;
        let field = |k: &str| -> Result<Value> {
            ck.metadata.get(k).cloned().ok_or_else(|| RaegError::Checkpoint { path: path.into(), reason: format!("metadata lacks `{k}`") })
        };
        Ok(Self {
            test_accuracy: serde_json::from_value(field("test_accuracy")?)?,
            val_accuracy: serde_json::from_value(field("val_accuracy")?)?,
            feature_member: serde_json::from_value(field("feature_member")?)?,
            ensemble: ck.model,
            store: ck.store,
        })
    }

    pub fn victims(&self, cfg: &TargetsConfig) -> Result<Ensemble> {
        let names = cfg.victim_names();
        self.ensemble.subset(&names.iter().map(String::as_str).collect::<Vec<_>>())
    }

    pub fn held_out(&self, cfg: &TargetsConfig) -> Result<Option<Ensemble>> {
        if cfg.held_out.is_empty() {
            return Ok(None);
        }
        Ok(Some(self.ensemble.subset(&cfg.held_out.iter().map(String::as_str).collect::<Vec<_>>())?))
    }

    pub fn feature_extractor(&self) -> Result<FeatureExtractor> {
        let i = self
            .ensemble
            .member_index(&self.feature_member)
            .ok_or_else(|| RaegError::config("targets", format!("feature member `{}` not in ensemble", self.feature_member)))?;
        Ok(FeatureExtractor::new(self.ensemble.members()[i].clone()))
    }

    pub fn digest(&self) -> String {
        store_digest(&self.store)
    }

    /// Mean clean test accuracy over `names`.
    pub fn clean_accuracy(&self, names: &[String]) -> f64 {
        let accs: Vec<f64> = names.iter().filter_map(|n| self.test_accuracy.get(n)).collect();
        accs.iter().sum::<f64>() / accs.len().max(1) as f64
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub histories: Vec<(String, Vec<EpochRecord>)>,
    pub test_accuracy: AccuracyReport,
}

pub fn check_dataset_classes(dataset: &Dataset, members: &[ClassifierConfig]) -> Result<()> {
    if dataset.num_classes() < 2 {
        return Err(RaegError::Dataset(format!("{} class(es); classification needs at least 2", dataset.num_classes())));
    }
    if let Some(m) = members.iter().find(|m| m.num_classes != dataset.num_classes()) {
        return Err(RaegError::Dataset(format!(
            "member `{}` expects {} classes but the dataset has {}",
            m.name,
            m.num_classes,
            dataset.num_classes()
        )));
    }
    if dataset.train.is_empty() || dataset.test.is_empty() {
        return Err(RaegError::Dataset("empty train or test split".into()));
    }
    Ok(())
}

/// Train every configured member; victims' strongest becomes the feature extractor.
pub fn pretrain_targets(dataset: &Dataset, cfg: &TargetsConfig, seed: u64) -> Result<(Targets, PretrainReport)> {
    cfg.validate()?;
    check_dataset_classes(dataset, &cfg.members)?;
    let mut store = ParamStore::new();
    let ensemble = Ensemble::new(cfg.ensemble(), &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (fit, val) = holdout_split(&dataset.train);
    let mut histories = Vec::new();
    let mut val_acc = Vec::new();
    for (i, m) in ensemble.members().iter().enumerate() {
        let t = ClassifierTraining {
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            max_epochs: cfg.max_epochs,
            patience: cfg.patience,
            seed: seed.wrapping_add(i as u64 + 1),
        };
        let h = train_classifier(m, &mut store, &format!("targets.{}.", m.name()), &fit, &val, &t)?;
        log::info!("target `{}`: {} epochs, best val {:.3}", m.name(), h.len(), h.iter().map(|r| r.val_accuracy).fold(0.0, f64::max));
        histories.push((m.name().to_string(), h));
    }
    for m in ensemble.members() {
        let l = Ensemble::single(m.clone()).logits_tensor(&store, &val.images, 64)?;
        val_acc.push((m.name().to_string(), crate::targets::top1_accuracy(&l[0], &val.labels)?));
    }
    let val_accuracy = AccuracyReport::new(val_acc);
    let victims = cfg.victim_names();
    let feature_member = victims
        .iter()
        .max_by(|a, b| val_accuracy.get(a).partial_cmp(&val_accuracy.get(b)).expect("finite accuracy"))
        .expect("validated victims")
        .clone();
    let test_accuracy = ensemble.accuracy(&store, &dataset.test.images, &dataset.test.labels, 64)?;
    let report = PretrainReport { histories, test_accuracy: test_accuracy.clone() };
    Ok((Targets { ensemble, store, test_accuracy, val_accuracy, feature_member }, report))
}

/// Counters and controller state persisted with generator checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epoch: usize,
    pub step: u64,
    pub gamma: f64,
    pub psnr_ema: Option<f64>,
}

/// One logged step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub gamma: f64,
    pub psnr_prt: f64,
    pub attack: String,
    pub report: LossReport,
    /// Unweighted PSNR-budget penalty.
    pub budget: f64,
}

pub const CURVE_HEADER: [&str; 17] = [
    "epoch", "step", "gamma", "psnr_prt", "attack", "prt", "rev", "per", "cls", "gan", "dis", "total", "grad_prt", "grad_rev",
    "grad_cls", "grad_gan", "budget",
];

impl StepRecord {
    fn row(&self) -> Vec<String> {
        let mut row = vec![self.epoch.to_string(), self.step.to_string(), self.gamma.to_string(), self.psnr_prt.to_string(), self.attack.clone()];
        row.extend(self.report.values().iter().map(|v| v.to_string()));
        for term in ["prt", "rev", "cls", "gan"] {
            row.push(self.report.grad_norms.iter().find(|g| g.0 == term).map(|g| g.1.to_string()).unwrap_or_default());
        }
        row.push(self.budget.to_string());
        row
    }
}

/// Generator, discriminator, their optimizers, and the frozen targets they train against.
pub struct Trainer<'a> {
    pub cfg: RunConfig,
    pub gen: Generator,
    pub gstore: ParamStore<f32>,
    pub gopt: Adam<f32>,
    pub disc: Discriminator,
    pub dstore: ParamStore<f32>,
    pub dopt: Adam<f32>,
    pub victims: Ensemble,
    pub targets: &'a Targets,
    pub features: Option<FeatureExtractor>,
    pub state: TrainState,
}

fn discriminator_step(disc: &Discriminator, store: &mut ParamStore<f32>, opt: &mut Adam<f32>, image: &Tensor<f32>, protected: &Tensor<f32>) -> Result<f64> {
    let tape = Tape::new();
    let bind = Binding::new(&tape, &*store, true);
    let loss = loss_dis(&bind, disc, tape.constant(image.clone()), tape.constant(protected.clone()))?;
    let value = numeric("dis", loss.item() as f64)?;
    let grads = bind.gradients(&tape.backward(loss));
    drop(bind);
    opt.step(store, &grads);
    disc.power_iteration(store);
    Ok(value)
}

fn attack_label(specs: &[AttackSpec]) -> String {
    let mut kinds: Vec<String> = specs.iter().map(|s| serde_json::to_value(s.kind()).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()).collect();
    kinds.dedup();
    kinds.join("+")
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &RunConfig, targets: &'a Targets) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.optimizer.seed;
        let mut gstore = ParamStore::new();
        let gen = Generator::new(cfg.model.clone(), &mut gstore, &mut ChaCha8Rng::seed_from_u64(seed))?;
        let mut dstore = ParamStore::new();
        let disc = Discriminator::new(cfg.discriminator.clone(), &mut dstore, &mut ChaCha8Rng::seed_from_u64(seed.wrapping_add(1)))?;
        let features = if cfg.losses.alpha != 0.0 { Some(targets.feature_extractor()?) } else { None };
        Ok(Self {
            gopt: Adam::new(cfg.optimizer.adam(cfg.optimizer.lr)),
            dopt: Adam::new(cfg.optimizer.adam(cfg.optimizer.disc_lr)),
            victims: targets.victims(&cfg.targets)?,
            state: TrainState { epoch: 0, step: 0, gamma: cfg.losses.gamma, psnr_ema: None },
            cfg: cfg.clone(),
            gen,
            gstore,
            disc,
            dstore,
            targets,
            features,
        })
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { gamma: self.state.gamma, ..self.cfg.losses }
    }

    /// One alternating iteration: a discriminator update, then a generator update.
    pub fn train_step(&mut self, images: &Tensor<f32>, labels: &[usize], rng: &mut ChaCha8Rng) -> Result<StepRecord> {
        self.gen.check_input(images.shape())?;
        let w = self.weights();
        let specs = if self.cfg.attacks.per_sample {
            (0..images.dim(0)).map(|_| sample_attack(rng, &self.cfg.attacks)).collect::<Result<Vec<_>>>()?
        } else {
            vec![sample_attack(rng, &self.cfg.attacks)?]
        };
        let with_grad_norms = self.cfg.logging.grad_norm_every > 0 && self.state.step % self.cfg.logging.grad_norm_every as u64 == 0;

        let tape = Tape::new();
        let bg = Binding::new(&tape, &self.gstore, true);
        let x = tape.constant(images.clone());
        let protected = self.gen.protect(&bg, x)?;
        let q = quantize_ste(protected);
        let q_value = q.value();
        // the discriminator sees what an adversary would see
        let dis = if w.delta != 0.0 { discriminator_step(&self.disc, &mut self.dstore, &mut self.dopt, images, &q_value)? } else { 0.0 };
        let be = Binding::new(&tape, &self.targets.store, false);
        let bd = Binding::new(&tape, &self.dstore, false);
        let attacked = if specs.len() == 1 { apply_attack(&specs[0], q)? } else { apply_attack_per_sample(&specs, q)? };
        let recovered = self.gen.recover(&bg, q)?;
        let prt = loss_prt(x, protected)?;
        let (rev, per) = loss_rev(&be, self.features.as_ref(), x, recovered, w.alpha)?;
        let cls = if w.gamma != 0.0 {
            loss_cls(&be, &self.victims, recovered, attacked, labels, &w)?
        } else {
            tape.constant(Tensor::scalar(0.0))
        };
        let gan = if w.delta != 0.0 { loss_gan(&bd, &self.disc, q)? } else { tape.constant(Tensor::scalar(0.0)) };
        let terms = LossTerms { prt, rev, per, cls, gan };
        let (mut total, mut report) = loss_total(&terms, dis, &w)?;
        let budget_weight = self.cfg.controller.budget_weight;
        let budget = if budget_weight != 0.0 {
            let b = loss_budget(x, q, self.cfg.controller.target_psnr)?;
            total = total.add(b.scale(budget_weight));
            report.total = numeric("total", total.item() as f64)?;
            numeric("budget", b.item() as f64)?
        } else {
            0.0
        };
        if with_grad_norms {
            for (name, term) in [("prt", prt), ("rev", rev.scale(w.beta)), ("cls", cls.scale(w.gamma)), ("gan", gan.scale(w.delta))] {
                let g = bg.gradients(&tape.backward(term));
                let norm = g.iter().map(|(_, t)| t.sum_squares() as f64).sum::<f64>().sqrt();
                report.grad_norms.push((name.to_string(), norm));
            }
        }
        let grads = bg.gradients(&tape.backward(total));
        let psnr = psnr_per_image(images, &q_value)?.iter().map(|p| p.min(PSNR_CAP)).sum::<f64>() / images.dim(0) as f64;
        drop((bg, be, bd));
        self.gopt.step(&mut self.gstore, &grads);
        self.gen.power_iteration(&mut self.gstore);

        let record = StepRecord {
            epoch: self.state.epoch,
            step: self.state.step,
            gamma: w.gamma,
            psnr_prt: psnr,
            attack: attack_label(&specs),
            report,
            budget,
        };
        self.state.step += 1;
        self.update_controller(psnr);
        Ok(record)
    }

    fn update_controller(&mut self, psnr: f64) {
        let c = &self.cfg.controller;
        let ema = match self.state.psnr_ema {
            Some(e) => 0.9 * e + 0.1 * psnr,
            None => psnr,
        };
        self.state.psnr_ema = Some(ema);
        if !c.enabled {
            return;
        }
        if ema > c.target_psnr + c.tolerance {
            self.state.gamma *= 1.0 + c.rate;
        } else if ema < c.target_psnr - c.tolerance {
            self.state.gamma /= 1.0 + c.rate;
        }
        self.state.gamma = self.state.gamma.clamp(c.min_gamma, c.max_gamma);
    }

    pub fn generator_path(dir: &Path) -> PathBuf {
        default_path(dir, Generator::KIND)
    }

    pub fn discriminator_path(dir: &Path) -> PathBuf {
        default_path(dir, Discriminator::KIND)
    }

    fn metadata(&self) -> Value {
        json!({
            "run": self.cfg,
            "state": self.state,
            "victims": self.cfg.targets.victim_names(),
            "targets_digest": self.targets.digest(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        save_model(&Self::generator_path(dir), &self.gen, &self.gstore, self.metadata(), Some(&self.gopt))?;
        save_model(&Self::discriminator_path(dir), &self.disc, &self.dstore, json!({"state": self.state}), Some(&self.dopt))
    }

    /// Restore generator, discriminator and optimizer state saved by [`Trainer::save`].
    pub fn resume(&mut self, dir: &Path) -> Result<()> {
        let g = load_model::<Generator, f32>(&Self::generator_path(dir), Some(&self.cfg.model))?;
        let run = g.metadata.get("run").cloned().unwrap_or(Value::Null);
        // epochs may be extended and logging changed; anything else must match
        for section in ["losses", "attacks", "optimizer", "data", "targets", "discriminator", "controller"] {
            let mut expected = serde_json::to_value(&self.cfg)?[section].clone();
            let mut found = run.get(section).cloned().unwrap_or(Value::Null);
            if section == "optimizer" {
                for v in [&mut expected, &mut found] {
                    if let Some(o) = v.as_object_mut() {
                        o.remove("epochs");
                    }
                }
            }
            if let Some((field, expected, found)) = first_difference(&expected, &found, section) {
                return Err(RaegError::ConfigMismatch { field, expected, found });
            }
        }
        let d = load_model::<Discriminator, f32>(&Self::discriminator_path(dir), Some(&self.cfg.discriminator))?;
        self.state = serde_json::from_value(g.metadata["state"].clone())?;
        self.gopt = Adam::new(self.cfg.optimizer.adam(self.cfg.optimizer.lr));
        g.restore_optimizer(&mut self.gopt);
        self.dopt = Adam::new(self.cfg.optimizer.adam(self.cfg.optimizer.disc_lr));
        d.restore_optimizer(&mut self.dopt);
        self.gen = g.model;
        self.gstore = g.store;
        self.disc = d.model;
        self.dstore = d.store;
        Ok(())
    }

    /// Train one epoch over `train`; returns the logged rows.
    pub fn run_epoch(&mut self, train: &Split, mut log: impl FnMut(&StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let mut rng = epoch_rng(self.cfg.optimizer.seed, self.state.epoch, 0x6E4);
        let mut rows = Vec::new();
        let every = self.cfg.logging.log_every.max(1) as u64;
        for (x, y) in train.batches(self.cfg.optimizer.batch_size, Some(&mut rng)) {
            let record = self.train_step(&x, &y, &mut rng)?;
            if record.step % every == 0 {
                log(&record)?;
                rows.push(record);
            }
        }
        self.state.epoch += 1;
        Ok(rows)
    }
}

/// Rewrite the curve file keeping only rows up to `last_step`, or start it fresh.
fn prepare_curves(path: &Path, last_step: Option<u64>) -> Result<csv::Writer<std::fs::File>> {
    let mut kept = Vec::new();
    if let (Some(last), true) = (last_step, path.exists()) {
        let mut reader = csv::Reader::from_path(path)?;
        for rec in reader.records() {
            let rec = rec?;
            if rec.get(1).and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < last) {
                kept.push(rec);
            }
        }
    }
    let mut w = csv::Writer::from_writer(OpenOptions::new().create(true).write(true).truncate(true).open(path)?);
    w.write_record(CURVE_HEADER)?;
    for rec in kept {
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(w)
}

pub struct TrainOutcome<'a> {
    pub trainer: Trainer<'a>,
    /// Mean loss report per epoch trained in this call.
    pub epochs: Vec<LossReport>,
}

fn mean_report(rows: &[StepRecord]) -> LossReport {
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; 7];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.report.values()) {
            *m += v / n;
        }
    }
    let [prt, rev, per, cls, gan, dis, total] = mean;
    LossReport { prt, rev, per, cls, gan, dis, total, grad_norms: Vec::new() }
}

/// Full training run writing checkpoints and `curves.csv` under `out`.
///
/// With `resume`, training continues from the checkpoint in `out` (whose
/// configuration must match). With zero epochs the initial checkpoint is written.
pub fn train<'a>(cfg: &RunConfig, dataset: &Dataset, targets: &'a Targets, out: &Path, resume: bool) -> Result<TrainOutcome<'a>> {
    check_dataset_classes(dataset, &cfg.targets.members)?;
    let mut trainer = Trainer::new(cfg, targets)?;
    std::fs::create_dir_all(out)?;
    let resumed = resume && Trainer::generator_path(out).exists();
    if resumed {
        trainer.resume(out)?;
    }
    let digest = targets.digest();
    let mut curves = prepare_curves(&out.join(CURVES_FILE), resumed.then_some(trainer.state.step))?;
    if !resumed {
        trainer.save(out)?;
    }
    let mut epochs = Vec::new();
    while trainer.state.epoch < cfg.optimizer.epochs {
        let rows = trainer.run_epoch(&dataset.train, |r| {
            curves.write_record(r.row())?;
            Ok(curves.flush()?)
        })?;
        let mean = mean_report(&rows);
        log::info!(
            "epoch {}/{}: prt {:.4} rev {:.4} cls {:.3} gan {:.3} dis {:.3} gamma {:.4} psnr_ema {:.2}",
            trainer.state.epoch,
            cfg.optimizer.epochs,
            mean.prt,
            mean.rev,
            mean.cls,
            mean.gan,
            mean.dis,
            trainer.state.gamma,
            trainer.state.psnr_ema.unwrap_or(f64::NAN)
        );
        epochs.push(mean);
        let every = cfg.logging.checkpoint_every.max(1);
        if trainer.state.epoch % every == 0 || trainer.state.epoch == cfg.optimizer.epochs {
            trainer.save(out)?;
        }
    }
    if targets.digest() != digest {
        return Err(RaegError::Numeric { term: "targets".into(), detail: "frozen target parameters changed during training".into() });
    }
    Ok(TrainOutcome { trainer, epochs })
}
