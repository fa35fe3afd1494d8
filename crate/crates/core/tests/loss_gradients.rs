//! Finite-difference checks of every loss at f64 on 8×8 images.

use raeg::losses::{loss_budget, loss_cls, loss_dis, loss_gan, loss_prt, loss_rev, LossWeights};
use raeg::targets::{Arch, ClassifierConfig, Discriminator, DiscriminatorConfig, Ensemble, EnsembleConfig, FeatureExtractor};
use raeg_autograd::gradcheck::{check_sampled, GradReport};
use raeg_autograd::{Binding, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const COORDS: usize = 24;
const TOL: f64 = 1e-2;

fn image(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::<f64>::rand_uniform(vec![2, 3, 8, 8], 0.05, 0.95, rng)
}

fn assert_ok(what: &str, r: &GradReport) {
    assert!(r.checked >= 20, "{what}: only {} coordinates", r.checked);
    assert!(r.max_rel_error < TOL, "{what}: {r:?}");
}

fn ensemble(store: &mut ParamStore<f64>) -> Ensemble {
    let cfg = EnsembleConfig {
        members: vec![ClassifierConfig::new("a", Arch::Plain, 4, 5), ClassifierConfig::new("b", Arch::Residual, 4, 5)],
    };
    Ensemble::new(cfg, store, &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

#[test]
fn protection_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let inputs = [image(&mut rng), image(&mut rng)];
    let r = check_sampled(&inputs, 1e-6, COORDS, &mut rng, |_, v| loss_prt(v[0], v[1]).unwrap());
    assert_ok("prt", &r);
}

#[test]
fn recovery_loss_with_perceptual_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let e = ensemble(&mut store);
    let features = FeatureExtractor::new(e.members()[1].clone());
    let original = image(&mut rng);
    // features of the original are a fixed target, so only the recovered side varies
    let r = check_sampled(&[image(&mut rng)], 1e-6, 2 * COORDS, &mut rng, |tape, v| {
        let bind = Binding::new(tape, &store, false);
        let (rev, per) = loss_rev(&bind, Some(&features), tape.constant(original.clone()), v[0], 0.5).unwrap();
        rev.add(per)
    });
    assert_ok("rev+per", &r);
}

#[test]
fn classification_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let e = ensemble(&mut store);
    let labels = [1, 4];
    let inputs = [image(&mut rng), image(&mut rng)];
    let r = check_sampled(&inputs, 1e-6, COORDS, &mut rng, |tape, v| {
        let bind = Binding::new(tape, &store, false);
        loss_cls(&bind, &e, v[0], v[1], &labels, &LossWeights::default()).unwrap()
    });
    assert_ok("cls", &r);
    let tempered = LossWeights { attack_temperature: 3.0, attack_ce_cap: Some(5.0), ..LossWeights::default() };
    let r = check_sampled(&inputs, 1e-6, COORDS, &mut rng, |tape, v| {
        let bind = Binding::new(tape, &store, false);
        loss_cls(&bind, &e, v[0], v[1], &labels, &tempered).unwrap()
    });
    assert_ok("cls tempered", &r);
}

#[test]
fn psnr_budget() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // two unrelated random images sit far below 28 dB, so the shortfall is active everywhere
    let inputs = [image(&mut rng), image(&mut rng)];
    let r = check_sampled(&inputs, 1e-6, COORDS, &mut rng, |_, v| loss_budget(v[0], v[1], 28.0).unwrap());
    assert_ok("budget", &r);
}

#[test]
fn adversarial_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let d = Discriminator::new(DiscriminatorConfig { width: 4, ..DiscriminatorConfig::default() }, &mut store, &mut rng).unwrap();
    let inputs = [image(&mut rng), image(&mut rng)];
    let gan = check_sampled(&inputs[1..], 1e-6, COORDS, &mut rng, |tape, v| {
        let bind = Binding::new(tape, &store, false);
        loss_gan(&bind, &d, v[0]).unwrap()
    });
    assert_ok("gan", &gan);
    let dis = check_sampled(&inputs, 1e-6, COORDS, &mut rng, |tape, v| {
        let bind = Binding::new(tape, &store, false);
        loss_dis(&bind, &d, v[0], v[1]).unwrap()
    });
    assert_ok("dis", &dis);
    // the generator must actually feel the discriminator
    let tape = raeg_autograd::Tape::new();
    let bind = Binding::new(&tape, &store, false);
    let x = tape.leaf(inputs[1].clone());
    let g = tape.backward(loss_gan(&bind, &d, x).unwrap());
    assert!(g.get_or_zeros(x).max_abs() > 0.0);
}
