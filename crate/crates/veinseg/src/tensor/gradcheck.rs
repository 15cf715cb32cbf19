//! Central finite-difference oracle for gradient verification.
//!
//! Always runs in `f64`; the relative tolerances in the test suites assume
//! 64-bit evaluation of the checked function.

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `point`.
pub fn numeric_gradient<F>(mut f: F, point: &Tensor<f64>, step: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument("step must be positive".into()));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape().to_vec());
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite("finite-difference probe".into()));
        }
        grad.data_mut()[i] = (fp - fm) / (2.0 * step);
    }
    Ok(grad)
}

/// Max over coordinates of `|analytic - central| / max(1, |central|)`.
pub fn finite_difference_check<F>(
    f: F,
    point: &Tensor<f64>,
    analytic: &Tensor<f64>,
    step: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor<f64>) -> Result<f64>,
{
    point.require_same_shape(analytic, "finite_difference_check")?;
    let numeric = numeric_gradient(f, point, step)?;
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let err = (a - n).abs() / n.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_at_three() {
        // f(x) = x^2, f'(3) = 6; central difference is exact for quadratics
        // up to rounding.
        let point = Tensor::scalar(3.0);
        let g = numeric_gradient(|t| Ok(t.data()[0] * t.data()[0]), &point, 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-6, "numeric {}", g.data()[0]);

        let analytic = Tensor::scalar(6.0);
        let err = finite_difference_check(
            |t| Ok(t.data()[0] * t.data()[0]),
            &point,
            &analytic,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn rejects_bad_step() {
        let point = Tensor::scalar(1.0);
        assert!(numeric_gradient(|t| Ok(t.data()[0]), &point, 0.0).is_err());
    }

    #[test]
    fn flags_nonfinite_probe() {
        // ln(x - 1e-5) is non-finite at both probes around x = 0.
        let point = Tensor::scalar(0.0);
        let r = numeric_gradient(|t| Ok((t.data()[0] - 1e-5).ln()), &point, 1e-5);
        assert!(r.is_err());
    }
}
