//! AdamW with decoupled weight decay, global-norm clipping, and the
//! step learning-rate schedule.

use crate::param::ParamStore;
use crate::tensor::Scalar;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamW {
    /// One update from the gradients accumulated in `store`. Fails before
    /// touching any value if a gradient is non-finite.
    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.step_with_lr(store, self.lr)
    }

    pub fn step_with_lr<T: Scalar>(&self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| !p.grad.is_finite()) {
            return Err(Error::NonFiniteGradient(p.name.clone()));
        }
        store.step += 1;
        let t = store.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let decay = T::of(1.0 - lr * self.weight_decay);
        let lr_t = T::of(lr);
        let (bc1, bc2, eps) = (T::of(bc1), T::of(bc2), T::of(self.eps));
        for p in store.iter_mut() {
            let grads = p.grad.data();
            let m = p.first_moment.data_mut();
            for (mi, &g) in m.iter_mut().zip(grads) {
                *mi = b1 * *mi + one_b1 * g;
            }
            let v = p.second_moment.data_mut();
            for (vi, &g) in v.iter_mut().zip(grads) {
                *vi = b2 * *vi + one_b2 * g * g;
            }
            let m = p.first_moment.data();
            let v = p.second_moment.data();
            for ((w, &mi), &vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> f64 {
    let norm = store.grad_norm().to_f64_lossy();
    if norm > max_norm && norm > 0.0 {
        let s = T::of(max_norm / norm);
        for p in store.iter_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

/// Constant learning rate divided by 10 once `drop_fraction` of the
/// total steps have elapsed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub drop_fraction: f64,
}

impl StepSchedule {
    pub fn new(base_lr: f64, total_steps: usize) -> Self {
        Self {
            base_lr,
            total_steps,
            drop_fraction: 0.7,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let boundary = (self.total_steps as f64 * self.drop_fraction).ceil() as usize;
        if step >= boundary {
            self.base_lr / 10.0
        } else {
            self.base_lr
        }
    }
}
