//! Central finite differences, the oracle for every analytic gradient.

use super::tensor::{Scalar, Tensor};

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_grad<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> S,
    x: &Tensor<S>,
    h: S,
) -> Tensor<S> {
    let mut probe = x.clone();
    let two_h = h + h;
    let mut out = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / two_h;
    }
    out
}

/// Central differences that also flag coordinates where the function is not
/// smooth at scale `h`: a threshold or argmax switch inside `[x - h, x + h]`
/// makes the two one-sided slopes disagree.
pub fn finite_difference_grad_masked<S: Scalar>(
    f: impl Fn(&Tensor<S>) -> S,
    x: &Tensor<S>,
    h: S,
    kink_tol: S,
) -> (Tensor<S>, Vec<bool>) {
    let centre = f(x);
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let mut smooth = vec![true; x.len()];
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        let fwd = (up - centre) / h;
        let bwd = (centre - down) / h;
        out.data_mut()[i] = (up - down) / (h + h);
        let scale = fwd.abs().max(bwd.abs());
        if (fwd - bwd).abs() > kink_tol * scale.max(S::epsilon()) && (fwd - bwd).abs() > S::epsilon() {
            smooth[i] = false;
        }
    }
    (out, smooth)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error<S: Scalar>(a: &[S], b: &[S]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.as_f64(), y.as_f64());
        diff += (x - y) * (x - y);
        na += x * x;
        nb += y * y;
    }
    let denom = na.sqrt().max(nb.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}
