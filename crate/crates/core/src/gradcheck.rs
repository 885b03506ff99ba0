//! Central finite differences as a gradient oracle.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used by the shipped checks. Truncation error of the central
/// difference scales with ε², rounding error with `u·|f|/ε`; for the
/// O(1)-valued losses checked here 1e-4 keeps both below 1e-7 relative.
pub const DEFAULT_EPSILON: f64 = 1e-4;

/// Denominator floor of the per-coordinate relative error, so coordinates
/// whose true gradient is (numerically) zero are judged on absolute error.
pub const RELATIVE_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub worst_coordinate: Vec<usize>,
    pub epsilon_used: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// `(f(x + ε e_i) - f(x - ε e_i)) / 2ε` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, epsilon: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros_like(x);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                stage: format!("finite difference at flat coordinate {i}"),
            });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * epsilon);
    }
    Ok(grad)
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for axis in (0..shape.len()).rev() {
        idx[axis] = flat % shape[axis];
        flat /= shape[axis];
    }
    idx
}

/// Per-coordinate `|a - n| / max(|a|, |n|, RELATIVE_FLOOR)`, maximized.
pub fn compare(analytic: &Tensor<f64>, numeric: &Tensor<f64>, epsilon: f64, tolerance: f64) -> Result<GradCheckReport> {
    if analytic.shape() != numeric.shape() {
        return Err(Error::Shape(format!(
            "analytic {:?} vs numeric {:?}",
            analytic.shape(),
            numeric.shape()
        )));
    }
    let mut worst = 0usize;
    let mut max_err = 0.0f64;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let err = (a - n).abs() / a.abs().max(n.abs()).max(RELATIVE_FLOOR);
        if err.is_nan() || err > max_err {
            max_err = if err.is_nan() { f64::INFINITY } else { err };
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_relative_error: max_err,
        worst_coordinate: unravel(worst, analytic.shape()),
        epsilon_used: epsilon,
        tolerance,
        passed: max_err <= tolerance,
    })
}

/// Finite-difference `f` at `x` and compare against `analytic`.
pub fn check_gradient<F>(f: F, x: &Tensor<f64>, analytic: &Tensor<f64>, epsilon: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    let numeric = finite_diff_grad(f, x, epsilon)?;
    compare(analytic, &numeric, epsilon, tolerance)
}

/// Merge reports, keeping the worst.
pub fn worst_of(reports: impl IntoIterator<Item = GradCheckReport>) -> Option<GradCheckReport> {
    reports.into_iter().fold(None, |acc, r| match acc {
        Some(a) if a.max_relative_error >= r.max_relative_error => Some(GradCheckReport {
            passed: a.passed && r.passed,
            ..a
        }),
        Some(a) => Some(GradCheckReport {
            passed: a.passed && r.passed,
            ..r
        }),
        None => Some(r),
    })
}
