//! Central finite differences for validating analytic gradients.
//!
//! Everything here only evaluates forward functions, so it can check the
//! backward pass of any operation without sharing code with it.

use crate::error::Result;
use crate::tensor::Tensor;

/// Default central-difference step.
pub const STEP: f64 = 1e-5;

/// Absolute error below which two gradient entries are considered equal
/// regardless of their relative error (entries that are zero analytically).
pub const ABS_FLOOR: f64 = 1e-8;

/// `∂f/∂x_i ≈ (f(x + h e_i) − f(x − h e_i)) / 2h` for every element.
pub fn numerical_gradient(
    x: &Tensor<f64>,
    step: f64,
    mut f: impl FnMut(&Tensor<f64>) -> Result<f64>,
) -> Result<Tensor<f64>> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (hi - lo) / (2.0 * step);
    }
    Ok(grad)
}

/// Worst mismatch between an analytic and a numerical gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numerical: f64,
    pub relative_error: f64,
}

/// Relative error of one entry, `|a − n| / max(|a|, |n|)`, or 0 when the
/// absolute difference is under [`ABS_FLOOR`].
pub fn relative_error(analytic: f64, numerical: f64) -> f64 {
    let diff = (analytic - numerical).abs();
    if diff <= ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numerical.abs())
    }
}

/// Returns the worst entry if any exceeds `rel_tol`.
pub fn compare(analytic: &Tensor<f64>, numerical: &Tensor<f64>, rel_tol: f64) -> Option<Mismatch> {
    assert_eq!(analytic.shape(), numerical.shape(), "gradient shapes differ");
    analytic
        .data()
        .iter()
        .zip(numerical.data())
        .enumerate()
        .map(|(index, (&a, &n))| Mismatch {
            index,
            analytic: a,
            numerical: n,
            relative_error: relative_error(a, n),
        })
        .filter(|m| m.relative_error > rel_tol)
        .max_by(|a, b| a.relative_error.total_cmp(&b.relative_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let x = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = numerical_gradient(&x, STEP, |t| Ok(t.data().iter().map(|v| v * v).sum())).unwrap();
        let exact = x.map(|v| 2.0 * v);
        assert!(compare(&exact, &g, 1e-8).is_none());
    }

    #[test]
    fn reports_worst_entry() {
        let a = Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap();
        let n = Tensor::new(vec![3], vec![1.0, 1.1, 1.5]).unwrap();
        let m = compare(&a, &n, 1e-3).unwrap();
        assert_eq!(m.index, 2);
    }
}
