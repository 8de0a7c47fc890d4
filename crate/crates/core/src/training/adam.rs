use crate::autodiff::{Parameter, Scalar, Tensor};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Bias-corrected Adam moments for a list of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    /// Number of updates applied so far.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lr: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        AdamState {
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            lr,
        }
    }

    /// One update from the gradients stored in `params`. Nothing is modified
    /// if any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Parameter<S>], names: &[String]) -> Result<(), TrainError> {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        for (p, name) in params.iter().zip(names) {
            if !p.grad.all_finite() {
                return Err(TrainError::NonFinite {
                    step: self.t + 1,
                    param: name.clone(),
                });
            }
        }
        self.t += 1;
        let t = self.t as i32;
        let b1 = S::from_f64_lossy(self.beta1);
        let b2 = S::from_f64_lossy(self.beta2);
        let one = S::one();
        let corr1 = S::from_f64_lossy(1.0 - self.beta1.powi(t));
        let corr2 = S::from_f64_lossy(1.0 - self.beta2.powi(t));
        let lr = S::from_f64_lossy(self.lr);
        let eps = S::from_f64_lossy(self.eps);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Parameter { value, grad } = &mut **p;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((x, &g), (mi, vi)) in it {
                *mi = b1 * *mi + (one - b1) * g;
                *vi = b2 * *vi + (one - b2) * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
