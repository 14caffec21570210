//! Adam with decoupled weight decay and a step-decay schedule.

use efh_numcore::{Scalar, Tensor};

use crate::config::TrainSettings;
use crate::params::ParamStore;

/// Learning rate at `step` (0-based) of `total`: the base rate, times 0.1
/// from 70% of training and 0.01 from 90%.
pub fn scheduled_lr(base: f64, step: usize, total: usize) -> f64 {
    let frac = if total == 0 { 0.0 } else { step as f64 / total as f64 };
    if frac >= 0.9 {
        base * 0.01
    } else if frac >= 0.7 {
        base * 0.1
    } else {
        base
    }
}

/// Rescales gradients so their global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm<T: Scalar>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let c = T::c(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v = *v * c);
        }
    }
    norm
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub settings: TrainSettings,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, settings: TrainSettings) -> Self {
        let zeros = || store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect::<Vec<_>>();
        Self {
            settings,
            m: zeros(),
            v: zeros(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update at learning rate `lr`. Parameters without a gradient
    /// (frozen or unused) are left untouched. Weight decay applies to
    /// matrices and tables only, not to biases or norm scales.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) {
        self.steps += 1;
        if lr == 0.0 {
            return;
        }
        let s = self.settings;
        let t = self.steps as i32;
        let bc1 = 1.0 - s.beta1.powi(t);
        let bc2 = 1.0 - s.beta2.powi(t);
        let (b1, b2) = (T::c(s.beta1), T::c(s.beta2));
        let (one, eps) = (T::one(), T::c(s.adam_eps));
        let step_size = T::c(lr / bc1);
        let inv_bc2 = T::c(1.0 / bc2);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(i).and_then(Option::as_ref) else {
                continue;
            };
            if !store.is_trainable(id) {
                continue;
            }
            let p = store.get_mut(id);
            let decay = if p.ndim() >= 2 { T::c(1.0 - lr * s.weight_decay) } else { one };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let denom = (*vv * inv_bc2).sqrt() + eps;
                *pv = *pv * decay - step_size * *mv / denom;
            }
        }
    }
}
