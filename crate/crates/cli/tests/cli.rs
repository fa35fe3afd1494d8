use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use raeg::config::RunConfig;
use raeg::generator::GeneratorConfig;
use raeg::targets::{Arch, ClassifierConfig, DiscriminatorConfig};

fn raeg(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_raeg")).args(args).env("RUST_LOG", "warn").env_remove("RAEG_CACHE").output().unwrap();
    if !out.status.success() {
        eprintln!("raeg {args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.model = GeneratorConfig { scales: 2, blocks_per_scale: 1, subnet_width: 4, ..GeneratorConfig::default() };
    cfg.data.image_size = 16;
    cfg.discriminator = DiscriminatorConfig { width: 4, ..DiscriminatorConfig::default() };
    cfg.targets.members = vec![
        ClassifierConfig::new("plain", Arch::Plain, 4, 10),
        ClassifierConfig::new("residual", Arch::Residual, 4, 10),
        ClassifierConfig::new("holdout", Arch::Plain, 4, 10),
    ];
    cfg.targets.max_epochs = 1;
    cfg.eval.pirate.width = 4;
    cfg.eval.pirate.max_epochs = 1;
    cfg.optimizer.batch_size = 4;
    cfg.optimizer.epochs = 1;
    let path = dir.join("tiny.json");
    std::fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn max_diff(a: &Path, b: &Path) -> u8 {
    let a = image::open(a).unwrap().to_rgb8();
    let b = image::open(b).unwrap().to_rgb8();
    assert_eq!(a.dimensions(), b.dimensions());
    a.as_raw().iter().zip(b.as_raw()).map(|(x, y)| x.abs_diff(*y)).max().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let (data, targets, run) = (dir.join("data"), dir.join("targets"), dir.join("run"));
    let cfg = tiny_config(dir);
    let cfg = p(&cfg);

    assert!(raeg(&["toy-data", "--out", p(&data), "--per-class", "4", "--size", "16", "--seed", "1"]).status.success());
    let o = raeg(&["train-targets", "--config", cfg, "--data", p(&data), "--out", p(&targets)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("feature extractor"));
    assert!(targets.join("ensemble.raeg").exists() && targets.join("labels.json").exists());

    let ens = targets.join("ensemble.raeg");
    let o = raeg(&["train", "--config", cfg, "--data", p(&data), "--targets", p(&ens), "--out", p(&run), "--epochs", "1"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("A_prt"), "{}", stdout(&o));
    let ckpt = run.join("generator.raeg");
    assert!(ckpt.exists() && run.join("curves.csv").exists() && run.join("config.json").exists());

    // protect, then recover; every pixel comes back within the printed bound
    let (prt, rec) = (dir.join("prt"), dir.join("rec"));
    let class = data.join("disc");
    let o = raeg(&["protect", "--ckpt", p(&ckpt), "--input", p(&class), "--out", p(&prt)]);
    assert!(o.status.success());
    let text = stdout(&o);
    let bound: u8 = text.split("= ").nth(1).and_then(|s| s.split('/').next()).unwrap().trim().parse().unwrap();
    assert!(raeg(&["recover", "--ckpt", p(&ckpt), "--input", p(&prt), "--out", p(&rec)]).status.success());
    let mut seen = 0;
    for entry in std::fs::read_dir(&class).unwrap() {
        let orig = entry.unwrap().path();
        let back = rec.join(orig.file_name().unwrap()).with_extension("png");
        assert!(max_diff(&orig, &back) <= bound);
        seen += 1;
    }
    assert_eq!(seen, 4);

    // eval twice: identical bytes, and the printed table agrees with report.json
    let (e1, e2) = (dir.join("eval1"), dir.join("eval2"));
    let args = |out: &Path| {
        raeg(&["eval", "--config", cfg, "--data", p(&data), "--ckpt", p(&ckpt), "--targets", p(&ens), "--out", p(out), "--seed", "3"])
    };
    let o = args(&e1);
    assert!(o.status.success());
    assert!(args(&e2).status.success());
    let r1 = std::fs::read(e1.join("report.json")).unwrap();
    assert_eq!(r1, std::fs::read(e2.join("report.json")).unwrap());
    assert_eq!(std::fs::read(e1.join("report.csv")).unwrap(), std::fs::read(e2.join("report.csv")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&r1).unwrap();
    let a_prt = report["a_prt"].as_f64().unwrap();
    let table = stdout(&o);
    let row = table.lines().nth(1).unwrap();
    assert_eq!(row.split_whitespace().nth(1).unwrap(), format!("{a_prt:.3}"), "{table}");

    let attacked = dir.join("attacked");
    assert!(raeg(&["attack", "--config", cfg, "--input", p(&prt), "--out", p(&attacked)]).status.success());
    assert!(attacked.join("jpeg50").is_dir(), "{:?}", std::fs::read_dir(&attacked).unwrap().collect::<Vec<_>>());

    let o = raeg(&["retrain-pirate", "--config", cfg, "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&run), "--variant", "clean,protected"]);
    assert!(o.status.success());
    let pirate: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("pirate.json")).unwrap()).unwrap();
    assert_eq!(pirate.as_array().unwrap().len(), 2);
}

#[test]
fn missing_config_sections_are_named() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.json");
    std::fs::write(&path, r#"{"model": {}, "attacks": {}, "optimizer": {}, "data": {}}"#).unwrap();
    let o = raeg(&["train", "--config", p(&path), "--data", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("losses") && err.contains("logging"), "{err}");
}

#[test]
fn unknown_keys_and_missing_checkpoint_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("typo.json");
    let mut v: serde_json::Value = serde_json::from_str(&RunConfig::desk().to_json()).unwrap();
    v["optimizer"]["learning_rate"] = 0.1.into();
    std::fs::write(&path, v.to_string()).unwrap();
    let o = raeg(&["train", "--config", p(&path), "--data", p(tmp.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));

    let o = raeg(&["recover", "--ckpt", p(&tmp.path().join("none.raeg")), "--input", p(tmp.path())]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}
