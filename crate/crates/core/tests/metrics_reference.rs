//! PSNR and SSIM against frozen scikit-image values.

mod common;

use common::{probe_pair, REFERENCE};
use raeg::metrics::{psnr, ssim};

#[test]
fn psnr_matches_reference() {
    for (k, &(want, _)) in REFERENCE.iter().enumerate() {
        let (a, b) = probe_pair(k);
        let got = psnr(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-4, "pair {k}: {got} vs {want}");
    }
}

#[test]
fn ssim_matches_reference() {
    for (k, &(_, want)) in REFERENCE.iter().enumerate() {
        let (a, b) = probe_pair(k);
        let got = ssim(&a, &b).unwrap();
        assert!((got - want).abs() < 1e-4, "pair {k}: {got} vs {want}");
    }
}
