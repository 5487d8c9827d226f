//! Central-difference gradient checking.

use super::tape::{Mat, Tape, Var};
use super::tensor::Tensor;

/// Largest `|analytic - numeric| / max(1, |analytic|)` over all entries.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(1.0)).fold(0.0, f64::max)
}

/// Central differences of a scalar function, one coordinate at a time.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Checks the tape gradient of `f` at `x` against central differences.
///
/// `f` records an operation on the tape given the input handle. Non-scalar
/// outputs are summed. Both routes run in `f64`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> f64
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    let (rows, cols) = (x.rows(), x.cols());
    let eval = |vals: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let xv = tape.leaf_mat(Mat::from_vec(rows, cols, vals.to_vec()));
        let out = f(&mut tape, xv);
        let s = tape.sum_all(out);
        tape.scalar(s)
    };
    let x0: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();

    let mut tape = Tape::new();
    let xv = tape.leaf_mat(Mat::from_vec(rows, cols, x0.clone()));
    let out = f(&mut tape, xv);
    let s = tape.sum_all(out);
    let analytic = tape.backward_scalar(s).values_or_zeros(xv, x0.len());

    let numeric = central_difference(eval, &x0, eps);
    max_relative_error(&analytic, &numeric)
}
