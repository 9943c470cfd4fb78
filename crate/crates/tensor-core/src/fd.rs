//! Central finite differences, the independent oracle the analytic gradients
//! are checked against.

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Central-difference gradient of a deterministic scalar function:
/// (f(x + eps*e_i) - f(x - eps*e_i)) / (2 eps) per coordinate.
pub fn finite_diff_grad<S, F>(f: F, x: &Tensor<S>, eps: f64) -> Result<Tensor<S>>
where
    S: Scalar,
    F: Fn(&Tensor<S>) -> Result<S>,
{
    assert!(eps > 0.0, "eps must be positive");
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    let h = S::from_f64(eps);
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (h + h);
    }
    Ok(grad)
}

/// Largest relative error between an analytic gradient and its
/// finite-difference estimate, with an absolute floor for near-zero entries.
pub fn max_rel_err<S: Scalar>(analytic: &Tensor<S>, reference: &Tensor<S>) -> f64 {
    assert_eq!(analytic.shape(), reference.shape());
    let mut worst = 0.0f64;
    for (&a, &r) in analytic.data().iter().zip(reference.data()) {
        let (a, r) = (a.to_f64(), r.to_f64());
        let denom = a.abs().max(r.abs()).max(1e-8);
        let err = (a - r).abs() / denom;
        if err > worst {
            worst = err;
        }
    }
    worst
}
