//! Central finite-difference oracle used by the gradient tests.
//!
//! Shared between the library's unit tests (via `#[path]`) and the integration
//! suites. Everything here runs in `f64`.

#![allow(dead_code)]

use super::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error so that entries whose true
/// gradient is ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-6;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_unit_rows(rows: usize, cols: usize, seed: u64) -> Matrix<f64> {
    let m = random_matrix(rows, cols, seed);
    let mut out = m.clone();
    for i in 0..rows {
        let n: f64 = m.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in out.row_mut(i) {
            *x /= n;
        }
    }
    out
}

/// Central differences of a scalar function with respect to every entry of `x`.
pub fn numeric_grad(x: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
    let mut grad = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for k in 0..x.data().len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + FD_STEP;
        let plus = f(&probe);
        probe.data_mut()[k] = orig - FD_STEP;
        let minus = f(&probe);
        probe.data_mut()[k] = orig;
        grad.data_mut()[k] = (plus - minus) / (2.0 * FD_STEP);
    }
    grad
}

/// Same as [`numeric_grad`] for a flat parameter slice addressed by a setter.
pub fn numeric_grad_slice(len: usize, mut f: impl FnMut(usize, f64) -> f64) -> Vec<f64> {
    (0..len)
        .map(|k| (f(k, FD_STEP) - f(k, -FD_STEP)) / (2.0 * FD_STEP))
        .collect()
}

pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR))
        .fold(0.0, f64::max)
}
