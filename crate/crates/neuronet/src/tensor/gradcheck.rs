//! Central finite differences for verifying analytic gradients.

use crate::error::Result;
use crate::tensor::{Element, Tensor};

/// Numerically estimate d f / d at, element by element, with central
/// differences (f(x+h e_i) - f(x-h e_i)) / 2h. O(2n) evaluations of `f`,
/// so only suitable for small tensors — which is the point: it is the
/// independent oracle the analytic backward pass is checked against.
pub fn finite_difference_gradient<T, F>(mut f: F, at: &Tensor<T>, step: f64) -> Result<Tensor<T>>
where
    T: Element,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let h = T::from_f64c(step);
    let base = at.data().to_vec();
    let mut grad = vec![T::zero(); base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let fp = f(&at.with_data(plus)?)?;
        let mut minus = base.clone();
        minus[i] -= h;
        let fm = f(&at.with_data(minus)?)?;
        grad[i] = (fp - fm) / (h + h);
    }
    at.with_data(grad)
}

/// Scaled infinity-norm disagreement between an analytic and a numeric
/// gradient: max_i |a_i - n_i| / max(max|a|, max|n|, 1e-12). Both gradients
/// near zero compare as equal.
pub fn relative_gradient_error<T: Element>(analytic: &Tensor<T>, numeric: &Tensor<T>) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut max_diff = 0.0f64;
    let mut max_mag = 1e-12f64;
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        max_diff = max_diff.max((a.to_f64c() - n.to_f64c()).abs());
        max_mag = max_mag.max(a.to_f64c().abs()).max(n.to_f64c().abs());
    }
    max_diff / max_mag
}
