//! Adam optimizer.

use ndarray::ArrayD;

use super::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: T::from_f64_c(lr),
            beta1: T::from_f64_c(0.9),
            beta2: T::from_f64_c(0.999),
            eps: T::from_f64_c(1e-8),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Apply one update with the given per-parameter gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: Vec<(ParamId, ArrayD<T>)>) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        for (id, g) in grads {
            let p = &mut store.params[id.0];
            debug_assert!(p.trainable, "gradient for frozen parameter {}", p.name);
            azip_update(p, &g, self.beta1, self.beta2, self.lr, self.eps, bc1, bc2);
        }
    }
}

fn azip_update<T: Scalar>(
    p: &mut super::params::Param<T>,
    g: &ArrayD<T>,
    b1: T,
    b2: T,
    lr: T,
    eps: T,
    bc1: T,
    bc2: T,
) {
    ndarray::Zip::from(&mut p.value)
        .and(&mut p.m)
        .and(&mut p.v)
        .and(g)
        .for_each(|w, m, v, &gi| {
            *m = b1 * *m + (T::one() - b1) * gi;
            *v = b2 * *v + (T::one() - b2) * gi * gi;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *w = *w - lr * mh / (vh.sqrt() + eps);
        });
}
