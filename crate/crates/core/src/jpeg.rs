//! Differentiable JPEG approximations.
//!
//! Both surrogates share the codec's transform path: RGB → YCbCr (JFIF),
//! 8×8 orthonormal block DCT, a quality-scaled quantization table, inverse
//! DCT and YCbCr → RGB. They differ in how the coefficients are degraded.

use raeg_autograd::{Float, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{RaegError, Result};
use crate::resample::separable;

pub const QF_MIN: u32 = 10;
pub const QF_MAX: u32 = 100;

#[rustfmt::skip]
const LUMA_Q: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61.,
    12., 12., 14., 19., 26., 58., 60., 55.,
    14., 13., 16., 24., 40., 57., 69., 56.,
    14., 17., 22., 29., 51., 87., 80., 62.,
    18., 22., 37., 56., 68., 109., 103., 77.,
    24., 35., 55., 64., 81., 104., 113., 92.,
    49., 64., 78., 87., 103., 121., 120., 101.,
    72., 92., 95., 98., 112., 100., 103., 99.,
];

#[rustfmt::skip]
const CHROMA_Q: [f64; 64] = [
    17., 18., 24., 47., 99., 99., 99., 99.,
    18., 21., 26., 66., 99., 99., 99., 99.,
    24., 26., 56., 99., 99., 99., 99., 99.,
    47., 66., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99.,
    99., 99., 99., 99., 99., 99., 99., 99.,
];

const RGB_TO_YCC: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168736, -0.331264, 0.5],
    [0.5, -0.418688, -0.081312],
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JpegMethod {
    /// Zero every coefficient outside a quality-dependent low-frequency zone.
    Mask,
    /// Cubic pseudo-rounding of the quantized coefficients.
    Soft,
}

pub const ALL_METHODS: [JpegMethod; 2] = [JpegMethod::Mask, JpegMethod::Soft];

/// Convex weights over JPEG surrogates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(JpegMethod, f64)>", into = "Vec<(JpegMethod, f64)>")]
pub struct InterpolationWeights(Vec<(JpegMethod, f64)>);

impl InterpolationWeights {
    pub fn new(weights: Vec<(JpegMethod, f64)>) -> Result<Self> {
        if weights.is_empty() {
            return Err(RaegError::config("attacks.jpeg_methods", "at least one JPEG method is required"));
        }
        if weights.iter().any(|&(_, w)| !(w >= 0.0 && w.is_finite())) {
            return Err(RaegError::config("attacks.jpeg_weights", "weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().map(|&(_, w)| w).sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(RaegError::config("attacks.jpeg_weights", format!("weights sum to {total}, expected 1")));
        }
        Ok(Self(weights))
    }

    pub fn single(method: JpegMethod) -> Self {
        Self(vec![(method, 1.0)])
    }

    pub fn uniform(methods: &[JpegMethod]) -> Result<Self> {
        let w = 1.0 / methods.len().max(1) as f64;
        Self::new(methods.iter().map(|&m| (m, w)).collect())
    }

    pub fn entries(&self) -> &[(JpegMethod, f64)] {
        &self.0
    }
}

impl TryFrom<Vec<(JpegMethod, f64)>> for InterpolationWeights {
    type Error = RaegError;
    fn try_from(v: Vec<(JpegMethod, f64)>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<InterpolationWeights> for Vec<(JpegMethod, f64)> {
    fn from(w: InterpolationWeights) -> Self {
        w.0
    }
}

pub fn check_quality(qf: u32) -> Result<()> {
    if (QF_MIN..=QF_MAX).contains(&qf) {
        Ok(())
    } else {
        Err(RaegError::config("qf", format!("quality factor {qf} outside [{QF_MIN}, {QF_MAX}]")))
    }
}

/// IJG quality scaling of the standard tables: `[luma, chroma]`, row-major.
pub fn quant_tables(qf: u32) -> [[f64; 64]; 2] {
    let q = qf.clamp(1, 100);
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let scaled = |base: &[f64; 64]| base.map(|b| (((b as u32 * scale + 50) / 100).clamp(1, 255)) as f64);
    [scaled(&LUMA_Q), scaled(&CHROMA_Q)]
}

/// Keep coefficient `(u, v)` iff `u + v < zone`.
pub fn mask_zone(qf: u32, chroma: bool) -> usize {
    let q = qf as f64 / 100.0;
    // chroma tables are coarser, so its zone shrinks faster
    let zone = if chroma { 15.0 * q * q } else { 15.0 * q };
    zone.round().max(1.0) as usize
}

fn dct_matrix<T: Float>() -> Tensor<T> {
    Tensor::from_fn(vec![8, 8], |i| {
        let (u, x) = ((i / 8) as f64, (i % 8) as f64);
        let c = if u == 0.0 { (1.0f64 / 8.0).sqrt() } else { 0.5 };
        T::of_f64(c * ((2.0 * x + 1.0) * u * std::f64::consts::PI / 16.0).cos())
    })
}

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn color_matrix<T: Float>(m: &[[f64; 3]; 3]) -> Tensor<T> {
    // transposed for `matmul_last`
    Tensor::from_fn(vec![3, 3], |i| T::of_f64(m[i % 3][i / 3]))
}

fn edge_pad_matrix<T: Float>(n: usize, padded: usize) -> Tensor<T> {
    Tensor::from_fn(vec![padded, n], |i| if (i / n).min(n - 1) == i % n { T::one() } else { T::zero() })
}

/// Per-channel table broadcast over `[B, 3, hb, wb, 8, 8]`.
fn channel_table<T: Float>(tables: &[[f64; 64]; 2], f: impl Fn(f64) -> f64) -> Tensor<T> {
    Tensor::from_fn(vec![3, 1, 1, 8, 8], |i| T::of_f64(f(tables[usize::from(i >= 64)][i % 64])))
}

/// Encode-side transform: `[B, 3, H, W]` in `[0, 1]` → DCT blocks `[B, 3, hb, wb, 8, 8]`.
fn analyze<'t, T: Float>(x: Var<'t, T>) -> Result<(Var<'t, T>, [usize; 2])> {
    let &[b, c, h, w] = x.shape().as_slice() else {
        return Err(RaegError::shape(format!("jpeg expects [B, 3, H, W], got {:?}", x.shape())));
    };
    if c != 3 {
        return Err(RaegError::shape(format!("jpeg expects 3 channels, got {c}")));
    }
    let tape = x.tape();
    let (hp, wp) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let x = if (hp, wp) != (h, w) { separable(x, &edge_pad_matrix(h, hp), &edge_pad_matrix(w, wp)) } else { x };
    let level = Tensor::from_vec(vec![3], vec![T::of_f64(-128.0), T::zero(), T::zero()])?;
    let ycc = x
        .scale(255.0)
        .permute(&[0, 2, 3, 1])
        .matmul_last(tape.constant(color_matrix(&RGB_TO_YCC)))
        .add_const(&level)
        .permute(&[0, 3, 1, 2]);
    let d = tape.constant(dct_matrix());
    let blocks = ycc.reshape(vec![b, 3, hp / 8, 8, wp / 8, 8]).permute(&[0, 1, 2, 4, 3, 5]);
    Ok((blocks.matmul_left(d).matmul_last(tape.constant(dct_matrix::<T>().transpose2d())), [h, w]))
}

fn synthesize<'t, T: Float>(coeffs: Var<'t, T>, [h, w]: [usize; 2]) -> Result<Var<'t, T>> {
    let tape = coeffs.tape();
    let shape = coeffs.shape();
    let (b, hb, wb) = (shape[0], shape[2], shape[3]);
    let d = dct_matrix::<T>();
    let pixels = coeffs
        .matmul_left(tape.constant(d.transpose2d()))
        .matmul_last(tape.constant(d))
        .permute(&[0, 1, 2, 4, 3, 5])
        .reshape(vec![b, 3, hb * 8, wb * 8]);
    let level = Tensor::from_vec(vec![3], vec![T::of_f64(128.0), T::zero(), T::zero()])?;
    let rgb = pixels
        .permute(&[0, 2, 3, 1])
        .add_const(&level)
        .matmul_last(tape.constant(color_matrix(&invert3(&RGB_TO_YCC))))
        .scale(1.0 / 255.0)
        .permute(&[0, 3, 1, 2]);
    Ok(if (hb * 8, wb * 8) != (h, w) { rgb.narrow(2, 0, h).narrow(3, 0, w) } else { rgb })
}

fn degrade<'t, T: Float>(coeffs: Var<'t, T>, qf: u32, method: JpegMethod) -> Var<'t, T> {
    let tables = quant_tables(qf);
    match method {
        JpegMethod::Mask => {
            let keep = Tensor::from_fn(vec![3, 1, 1, 8, 8], |i| {
                let (u, v) = ((i % 64) / 8, i % 8);
                if u + v < mask_zone(qf, i >= 64) { T::one() } else { T::zero() }
            });
            coeffs.mul_const(&keep)
        }
        JpegMethod::Soft => {
            let z = coeffs.mul_const(&channel_table(&tables, |q| 1.0 / q));
            let r = z.map_detached(|v| v.round());
            r.add(z.sub(r).cube()).mul_const(&channel_table(&tables, |q| q))
        }
    }
}

/// One surrogate at quality `qf`.
pub fn jpeg_method<'t, T: Float>(x: Var<'t, T>, qf: u32, method: JpegMethod) -> Result<Var<'t, T>> {
    check_quality(qf)?;
    let (coeffs, size) = analyze(x)?;
    synthesize(degrade(coeffs, qf, method), size)
}

/// Convex combination of surrogates.
pub fn jpeg_sim<'t, T: Float>(x: Var<'t, T>, qf: u32, weights: &InterpolationWeights) -> Result<Var<'t, T>> {
    check_quality(qf)?;
    let (coeffs, size) = analyze(x)?;
    let mut out: Option<Var<'t, T>> = None;
    for &(method, w) in weights.entries() {
        if w == 0.0 {
            continue;
        }
        let term = synthesize(degrade(coeffs, qf, method), size)?.scale(w);
        out = Some(match out {
            Some(acc) => acc.add(term),
            None => term,
        });
    }
    Ok(out.expect("weights sum to one"))
}

/// The same transform path with true rounding (non-differentiable reference).
pub fn jpeg_round<T: Float>(x: &Tensor<T>, qf: u32) -> Result<Tensor<T>> {
    check_quality(qf)?;
    let tape = Tape::new();
    let (coeffs, size) = analyze(tape.constant(x.clone()))?;
    let tables = quant_tables(qf);
    let q = channel_table::<T>(&tables, |q| q);
    let z = coeffs.mul_const(&channel_table(&tables, |q| 1.0 / q)).map_detached(|v| v.round()).mul_const(&q);
    Ok(synthesize(z, size)?.value())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ijg_table_scaling() {
        let [l50, c50] = quant_tables(50);
        assert_eq!(l50, LUMA_Q);
        assert_eq!(c50, CHROMA_Q);
        let [l100, _] = quant_tables(100);
        assert!(l100.iter().all(|&q| q == 1.0));
        // qf 10: scale 500
        let [l10, _] = quant_tables(10);
        assert_eq!(l10[0], 80.0);
        assert_eq!(l10[63], 255.0);
    }

    #[test]
    fn dct_is_orthonormal() {
        let d = dct_matrix::<f64>();
        let p = d.matmul(&d.transpose2d());
        for i in 0..8 {
            for j in 0..8 {
                assert!((p.data()[i * 8 + j] - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn color_roundtrip() {
        let m = invert3(&RGB_TO_YCC);
        let id = color_matrix::<f64>(&RGB_TO_YCC).transpose2d().matmul(&color_matrix::<f64>(&m).transpose2d());
        for i in 0..3 {
            for j in 0..3 {
                assert!((id.data()[i * 3 + j] - f64::from(u8::from(i == j))).abs() < 1e-12);
            }
        }
        // JFIF inverse constant for R from Cr
        assert!((m[0][2] - 1.402).abs() < 1e-4);
    }

    #[test]
    fn mask_keeps_everything_at_full_quality() {
        assert_eq!(mask_zone(100, false), 15);
        assert_eq!(mask_zone(100, true), 15);
        assert!(mask_zone(50, true) < mask_zone(50, false));
        assert!(mask_zone(10, false) >= 1);
        let tape = Tape::new();
        let x = Tensor::<f64>::from_fn(vec![1, 3, 8, 8], |i| ((i * 31) % 17) as f64 / 16.0);
        let y = jpeg_method(tape.constant(x.clone()), 100, JpegMethod::Mask).unwrap().value();
        assert!(y.zip_map(&x, |a, b| a - b).max_abs() < 1e-9);
    }

    #[test]
    fn weights_validated() {
        assert!(InterpolationWeights::new(vec![(JpegMethod::Mask, 0.3), (JpegMethod::Soft, 0.3)]).is_err());
        assert!(InterpolationWeights::new(vec![(JpegMethod::Mask, -0.5), (JpegMethod::Soft, 1.5)]).is_err());
        assert!(InterpolationWeights::new(vec![]).is_err());
        let w = InterpolationWeights::uniform(&ALL_METHODS).unwrap();
        let json = serde_json::to_string(&w).unwrap();
        assert_eq!(json, r#"[["mask",0.5],["soft",0.5]]"#);
        assert_eq!(serde_json::from_str::<InterpolationWeights>(&json).unwrap(), w);
        assert!(serde_json::from_str::<InterpolationWeights>(r#"[["mask",0.2]]"#).is_err());
    }

    #[test]
    fn quality_out_of_range() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::<f32>::zeros(vec![1, 3, 8, 8]));
        assert!(jpeg_sim(x, 9, &InterpolationWeights::single(JpegMethod::Soft)).is_err());
        assert!(jpeg_sim(x, 101, &InterpolationWeights::single(JpegMethod::Soft)).is_err());
    }

    #[test]
    fn unaligned_sizes_are_padded() {
        let tape = Tape::new();
        let x = Tensor::<f64>::from_fn(vec![2, 3, 10, 13], |i| ((i * 7) % 11) as f64 / 10.0);
        let y = jpeg_method(tape.constant(x.clone()), 100, JpegMethod::Mask).unwrap().value();
        assert_eq!(y.shape(), x.shape());
        assert!(y.zip_map(&x, |a, b| a - b).max_abs() < 1e-9);
    }
}
