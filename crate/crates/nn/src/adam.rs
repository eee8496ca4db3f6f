use crate::param::ParamStore;
use crate::scalar::Scalar;

/// Adam with bias correction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// Applies one update to every trainable parameter, then zeroes all gradients.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) {
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let eps = T::lit(self.eps);
        let lr = T::lit(self.lr);
        for p in store.iter_mut() {
            if p.trainable {
                p.adam.t += 1;
                let t = p.adam.t as i32;
                let c1 = one - b1.powi(t);
                let c2 = one - b2.powi(t);
                let grads = p.grad.data();
                let m = p.adam.m.data_mut();
                for (mi, &g) in m.iter_mut().zip(grads) {
                    *mi = b1 * *mi + (one - b1) * g;
                }
                let v = p.adam.v.data_mut();
                for (vi, &g) in v.iter_mut().zip(grads) {
                    *vi = b2 * *vi + (one - b2) * g * g;
                }
                let (m, v) = (p.adam.m.data(), p.adam.v.data());
                for ((x, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                    let m_hat = mi / c1;
                    let v_hat = vi / c2;
                    *x -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            p.grad.fill(T::zero());
        }
    }
}
