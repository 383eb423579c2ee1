//! Adam with standard defaults (beta1 0.9, beta2 0.999, eps 1e-8).

use super::layers::Param;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
        }
    }

    pub fn step<S: Scalar>(&mut self, params: &mut [&mut Param<S>]) {
        self.t += 1;
        let b1 = S::from_f64_(self.beta1);
        let b2 = S::from_f64_(self.beta2);
        let one = S::one();
        let bc1 = S::from_f64_(1.0 - self.beta1.powi(self.t as i32));
        let bc2 = S::from_f64_(1.0 - self.beta2.powi(self.t as i32));
        let lr = S::from_f64_(self.lr);
        let eps = S::from_f64_(self.eps);
        for p in params.iter_mut() {
            ndarray::Zip::from(&mut p.m)
                .and(&p.grad)
                .for_each(|m, &g| *m = b1 * *m + (one - b1) * g);
            ndarray::Zip::from(&mut p.v)
                .and(&p.grad)
                .for_each(|v, &g| *v = b2 * *v + (one - b2) * g * g);
            ndarray::Zip::from(&mut p.value)
                .and(&p.m)
                .and(&p.v)
                .for_each(|w, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
