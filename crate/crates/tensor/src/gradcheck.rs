//! Central finite-difference verification of reverse-mode gradients.

use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Coordinates whose gradient is below this fraction of the largest
/// analytic component are measured against that fraction instead of
/// their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// Smallest denominator used for the relative error. Below this magnitude
/// central differences are dominated by rounding, so the comparison becomes
/// absolute (`tol * ABSOLUTE_FLOOR`).
pub const ABSOLUTE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    /// Index of the worst coordinate.
    pub fn worst(&self) -> Option<usize> {
        self.rel_errors
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }
}

fn eval<F>(f: &F, x: &Tensor) -> Result<f64, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = f(&mut tape, v)?;
    tape.value(out)
        .item()
        .ok_or_else(|| TensorError::NonScalarLoss(tape.shape(out).to_vec()))
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// of step `h`.
///
/// # Panics
/// If `h` lies outside `[1e-8, 1e-3]`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape, Var) -> Result<Var, TensorError>,
{
    assert!((1e-8..=1e-3).contains(&h), "finite-difference step {h} out of range");
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let out = f(&mut tape, leaf)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(leaf)
        .map(|g| g.data().to_vec())
        .unwrap_or_else(|| vec![0.0; x.len()]);

    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((fp - fm) / (2.0 * h));
    }

    Ok(compare_gradients(analytic, numeric, tol))
}

/// Scores an analytic gradient against a numeric one with the floors above.
pub fn compare_gradients(analytic: Vec<f64>, numeric: Vec<f64>, tol: f64) -> GradCheckReport {
    let scale = analytic.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(ABSOLUTE_FLOOR);
    let rel_errors: Vec<f64> = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .collect();
    let max_rel_error = rel_errors.iter().fold(0.0_f64, |m, &v| m.max(v));
    GradCheckReport {
        analytic,
        numeric,
        rel_errors,
        max_rel_error,
        tol,
        passed: max_rel_error <= tol,
    }
}
