//! Central finite-difference checks of tape gradients.

use rand::Rng;

use crate::{Tape, Tensor, Var};

/// Gradients whose magnitudes are both below this are compared absolutely.
const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst coordinate
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn eval_scalar<F>(inputs: &[Tensor<f64>], f: &F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars);
    out.value().sum()
}

/// Compares analytic and central-difference gradients on the given coordinates.
///
/// `coords` holds (input index, flat index) pairs; the function's output is
/// summed to a scalar before differentiation.
pub fn check_coordinates<F>(inputs: &[Tensor<f64>], step: f64, coords: &[(usize, usize)], f: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars).sum();
    let grads = tape.backward(out);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();

    let mut report = GradReport::default();
    for &(input, index) in coords {
        let mut plus = inputs.to_vec();
        plus[input].data_mut()[index] += step;
        let mut minus = inputs.to_vec();
        minus[input].data_mut()[index] -= step;
        let numeric = (eval_scalar(&plus, &f) - eval_scalar(&minus, &f)) / (2.0 * step);
        let a = analytic[input].data()[index];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((input, index, a, numeric));
        }
    }
    report
}

/// Checks every coordinate of every input.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let coords: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j))).collect();
    check_coordinates(inputs, step, &coords, f)
}

/// Checks `per_input` random coordinates of each input.
pub fn check_sampled<F, R>(inputs: &[Tensor<f64>], step: f64, per_input: usize, rng: &mut R, f: F) -> GradReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
    R: Rng + ?Sized,
{
    let mut coords = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        for _ in 0..per_input {
            coords.push((i, rng.random_range(0..t.len())));
        }
    }
    check_coordinates(inputs, step, &coords, f)
}
