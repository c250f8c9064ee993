//! Central-difference verification of analytic gradients.
//!
//! Runs in `f64` regardless of what the checked code trains in: with a step
//! of 1e−3 the difference quotient needs roughly twice the mantissa of f32
//! before truncation error dominates round-off.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Coordinates where both gradients are this small count as matching; the
/// relative error of two near-zero values is noise.
const ZERO_FLOOR: f64 = 1e-10;

/// Checks the analytic gradient of a scalar map against central finite
/// differences at `at`, returning the worst per-coordinate relative error.
///
/// `f` evaluates the map and its analytic gradient; only the value part is
/// used for the difference quotients. Fails on non-finite values and on a
/// non-positive step.
pub fn grad_check<F>(f: F, at: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&Tensor<f64>) -> Result<(f64, Tensor<f64>)>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(
            "grad check",
            format!("step must be positive, got {step}"),
        ));
    }
    let (value, analytic) = f(at)?;
    if !value.is_finite() || !analytic.all_finite() {
        return Err(Error::NonFinite { op: "grad check" });
    }
    analytic.require_same_shape(at, "grad check")?;

    let mut worst = 0.0f64;
    let mut probe = at.clone();
    for i in 0..at.len() {
        let x = at.data()[i];
        probe.data_mut()[i] = x + step;
        let (plus, _) = f(&probe)?;
        probe.data_mut()[i] = x - step;
        let (minus, _) = f(&probe)?;
        probe.data_mut()[i] = x;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "grad check" });
        }
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < ZERO_FLOOR {
            0.0
        } else {
            (a - numeric).abs() / denom
        };
        worst = worst.max(rel);
    }
    Ok(worst)
}
