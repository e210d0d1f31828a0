//! Central finite-difference gradients, used by the test suites as an
//! independent oracle against the reverse-mode pass. Only forward
//! evaluations happen here.

use crate::tensor::Tensor;

/// Central-difference gradient of `f` with respect to `inputs[which]`.
pub fn fd_gradient(
    f: &dyn Fn(&[Tensor]) -> f64,
    inputs: &[Tensor],
    which: usize,
    h: f64,
) -> Tensor {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let n = work[which].numel();
    let mut grad = Tensor::zeros(&work[which].shape);
    for i in 0..n {
        let orig = work[which].data[i];
        work[which].data[i] = orig + h;
        let fp = f(&work);
        work[which].data[i] = orig - h;
        let fm = f(&work);
        work[which].data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Max-norm relative error between two gradient vectors.
pub fn rel_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape, "rel_error: shape mismatch");
    let mut num: f64 = 0.0;
    let mut den: f64 = 0.0;
    for (&x, &y) in a.data.iter().zip(b.data.iter()) {
        num = num.max((x - y).abs());
        den = den.max(x.abs().max(y.abs()));
    }
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}
