use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raeg::battery::real_attack_battery;
use raeg::checkpoint::load_model;
use raeg::config::RunConfig;
use raeg::data::{self, Dataset};
use raeg::eval::{self, PirateVariant, Toggle, PIRATE_VARIANTS};
use raeg::generator::{quantize, Generator};
use raeg::imageio::{from_rgb8, read_rgb, to_rgb8, write_png};
use raeg::training::{self, Targets, Trainer};
use raeg::{RaegError, Result};
use raeg_autograd::ParamStore;

#[derive(Parser)]
#[command(name = "raeg", version, about = "Protect images against classifiers with an invertible generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration (defaults to the built-in desk-scale settings).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root with one subdirectory per class.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Checkpoint to read.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Compute device hint; only `cpu` is available.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Target ensemble checkpoint (default: `ensemble.raeg` next to the output or checkpoint).
    #[arg(long)]
    targets: Option<PathBuf>,
    /// Decoded-dataset cache directory.
    #[arg(long, env = "RAEG_CACHE")]
    cache: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the procedural 10-class shape dataset.
    ToyData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pretrain the target classifiers.
    TrainTargets(Common),
    /// Train the generator against the frozen targets.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint in --out.
        #[arg(long)]
        resume: bool,
    },
    /// Protect every image in --input, writing PNGs to --out.
    Protect {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Recover every protected PNG in --input, writing PNGs to --out.
    Recover {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Apply the real attack battery to every image in --input.
    Attack {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score protection, recovery and robustness on the test split.
    Eval(Common),
    /// Train fresh classifiers on protected / defended / recovered training images.
    RetrainPirate {
        #[command(flatten)]
        common: Common,
        /// Variants to train (default: all).
        #[arg(long, value_delimiter = ',')]
        variant: Vec<PirateVariant>,
    },
    /// Retrain with components removed and compare.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Victim for the single-victim run.
        #[arg(long, default_value = "residual")]
        single_victim: String,
    },
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::desk(),
        };
        if let Some(s) = self.seed {
            cfg.optimizer.seed = s;
            cfg.eval.battery.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.optimizer.epochs = e;
        }
        if self.device != "cpu" {
            log::warn!("device `{}` is not available; running on cpu", self.device);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn dataset(&self, cfg: &RunConfig) -> Result<Dataset> {
        let root = self.data.as_ref().ok_or_else(|| RaegError::config("--data", "a dataset root is required"))?;
        data::load_dataset_cached(root, cfg.data.image_size, cfg.data.split_seed, self.cache.as_deref())
    }

    fn ckpt(&self) -> Result<&Path> {
        self.ckpt.as_deref().ok_or_else(|| RaegError::config("--ckpt", "a generator checkpoint is required"))
    }

    fn targets(&self, dataset: &Dataset) -> Result<Targets> {
        let candidates: Vec<PathBuf> = match &self.targets {
            Some(p) => vec![p.clone()],
            None => {
                let mut c = vec![Targets::path(&self.out)];
                if let Some(dir) = self.ckpt.as_deref().and_then(Path::parent) {
                    c.push(Targets::path(dir));
                }
                c
            }
        };
        let path = candidates.iter().find(|p| p.exists()).ok_or_else(|| {
            RaegError::config("--targets", format!("no target ensemble at {}; run train-targets first", candidates[0].display()))
        })?;
        let labels = path.with_file_name(data::LABELS_FILE);
        if labels.exists() {
            data::check_labels(&data::read_labels(&labels)?, &dataset.classes)?;
        }
        Targets::load(path)
    }
}

fn test_split(cfg: &RunConfig, ds: &Dataset) -> data::Split {
    match cfg.data.eval_limit {
        0 => ds.test.clone(),
        n => ds.test.head(n),
    }
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| RaegError::Dataset(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()).is_some_and(|e| ["png", "jpg", "jpeg"].contains(&e.to_ascii_lowercase().as_str())))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(RaegError::Dataset(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

fn png_name(path: &Path) -> PathBuf {
    PathBuf::from(path.file_stem().unwrap_or_default()).with_extension("png")
}

fn load_generator(common: &Common) -> Result<(Generator, ParamStore<f32>)> {
    let ck = load_model::<Generator, f32>(common.ckpt()?, None)?;
    Ok((ck.model, ck.store))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ToyData { out, per_class, size, seed } => {
            data::generate_toy(&out, per_class, size, seed)?;
            println!("wrote {} classes × {per_class} images to {}", data::TOY_CLASSES.len(), out.display());
        }
        Command::TrainTargets(c) => {
            let cfg = c.config()?;
            let ds = c.dataset(&cfg)?;
            let (targets, report) = training::pretrain_targets(&ds, &cfg.targets, cfg.optimizer.seed)?;
            let path = targets.save(&c.out)?;
            data::write_labels(&c.out, &ds.classes)?;
            write_json(&c.out.join("pretrain.json"), &report)?;
            println!("{:<12}{:>8}{:>10}", "member", "epochs", "test acc");
            for ((name, acc), (_, h)) in report.test_accuracy.per_member.iter().zip(&report.histories) {
                println!("{name:<12}{:>8}{acc:>10.3}", h.len());
            }
            println!("feature extractor: {}\nsaved {}", targets.feature_member, path.display());
        }
        Command::Train { common: c, resume } => {
            let cfg = c.config()?;
            let ds = c.dataset(&cfg)?;
            let targets = c.targets(&ds)?;
            std::fs::create_dir_all(&c.out)?;
            std::fs::write(c.out.join("config.json"), cfg.to_json() + "\n")?;
            let outcome = training::train(&cfg, &ds, &targets, &c.out, resume)?;
            let t = &outcome.trainer;
            println!("trained {} epochs ({} steps); checkpoint {}", t.state.epoch, t.state.step, Trainer::generator_path(&c.out).display());
            let report = eval::evaluate(&t.gen, &t.gstore, &targets, &test_split(&cfg, &ds), &cfg)?;
            print!("{}", report.format_quality_table());
        }
        Command::Protect { common: c, input } => {
            let (gen, store) = load_generator(&c)?;
            let mut worst = 0u8;
            let files = image_files(&input)?;
            for f in &files {
                let img = read_rgb(f)?;
                let x = from_rgb8(&[img.clone()])?;
                gen.check_input(x.shape()).map_err(|e| RaegError::Dataset(format!("{}: {e}", f.display())))?;
                let prt = quantize(&gen.protect_tensor(&store, &x)?);
                let rec = to_rgb8(&gen.recover_tensor(&store, &prt)?, 0)?;
                worst = worst.max(img.pixels().zip(rec.pixels()).flat_map(|(a, b)| (0..3).map(move |i| a.0[i].abs_diff(b.0[i]))).max().unwrap_or(0));
                write_png(&to_rgb8(&prt, 0)?, &c.out.join(png_name(f)))?;
            }
            println!("protected {} images into {}", files.len(), c.out.display());
            println!("recovery bound: max |I - recover(I_prt)| = {worst}/255");
        }
        Command::Recover { common: c, input } => {
            let (gen, store) = load_generator(&c)?;
            let files = image_files(&input)?;
            for f in &files {
                let x = from_rgb8(&[read_rgb(f)?])?;
                gen.check_input(x.shape()).map_err(|e| RaegError::Dataset(format!("{}: {e}", f.display())))?;
                write_png(&to_rgb8(&gen.recover_tensor(&store, &x)?, 0)?, &c.out.join(png_name(f)))?;
            }
            println!("recovered {} images into {}", files.len(), c.out.display());
        }
        Command::Attack { common: c, input } => {
            let cfg = c.config()?;
            let files = image_files(&input)?;
            for f in &files {
                let out = real_attack_battery(&from_rgb8::<f32>(&[read_rgb(f)?])?, &cfg.eval.battery)?;
                for w in &out.warnings {
                    log::warn!("{}: {w}", f.display());
                }
                for (name, t) in &out.entries {
                    write_png(&to_rgb8(t, 0)?, &c.out.join(name).join(png_name(f)))?;
                }
            }
            println!("attacked {} images into {}", files.len(), c.out.display());
        }
        Command::Eval(c) => {
            let cfg = c.config()?;
            let ds = c.dataset(&cfg)?;
            let targets = c.targets(&ds)?;
            let (gen, store) = load_generator(&c)?;
            let report = eval::evaluate_robustness(&gen, &store, &targets, &test_split(&cfg, &ds), &cfg)?;
            report.write(&c.out, "report")?;
            print!("{}\n{}", report.format_quality_table(), report.format_robustness_table());
            for w in &report.warnings {
                println!("warning: {w}");
            }
            println!("wrote {}", c.out.join("report.json").display());
        }
        Command::RetrainPirate { common: c, variant } => {
            let cfg = c.config()?;
            let ds = c.dataset(&cfg)?;
            let (gen, store) = load_generator(&c)?;
            let variants = if variant.is_empty() { PIRATE_VARIANTS.to_vec() } else { variant };
            let results = variants.iter().map(|&v| eval::retrain_pirate(&gen, &store, v, &ds, &cfg)).collect::<Result<Vec<_>>>()?;
            write_json(&c.out.join("pirate.json"), &results)?;
            print!("{}", eval::format_pirate_table(&results));
        }
        Command::Ablate { common: c, single_victim } => {
            let cfg = c.config()?;
            let ds = c.dataset(&cfg)?;
            let targets = c.targets(&ds)?;
            let toggles = [Toggle::NoDiscriminator, Toggle::NoPerceptual, Toggle::SingleVictim(single_victim)];
            let rows = eval::ablation_suite(&cfg, &ds, &targets, &test_split(&cfg, &ds), &toggles, &c.out)?;
            write_json(&c.out.join("ablation.json"), &rows)?;
            print!("{}", eval::format_ablation_table(&rows));
        }
    }
    Ok(())
}

fn exit_code(e: &RaegError) -> u8 {
    match e {
        RaegError::Config { .. } | RaegError::ConfigMismatch { .. } => 2,
        RaegError::Dataset(_) | RaegError::Image { .. } | RaegError::Label { .. } => 3,
        RaegError::Checkpoint { .. } => 4,
        RaegError::Numeric { .. } => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
