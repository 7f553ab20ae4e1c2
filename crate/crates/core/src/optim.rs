//! AdamW with decoupled weight decay and a linear warm-up schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{MeltError, Result};
use crate::params::{Grads, ParamKey, ParamSet};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Moments<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<ParamKey, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    /// Number of completed optimizer steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<ParamKey, Moments<T>> {
        &self.moments
    }

    pub(crate) fn restore(&mut self, step: u64, moments: BTreeMap<ParamKey, Moments<T>>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update of every trainable parameter in `sets`.
    ///
    /// The parameter is first shrunk by `lr·weight_decay`, then moved along
    /// the bias-corrected moment ratio. A trainable parameter without an
    /// entry in `grads` is an error.
    pub fn step(&mut self, sets: &mut [&mut ParamSet<T>], grads: &Grads<T>, lr: f64) -> Result<()> {
        for set in sets.iter() {
            for (i, p) in set.params().iter().enumerate() {
                if p.trainable && !grads.contains_key(&set.key(i)) {
                    return Err(MeltError::MissingGrad(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::c(c.beta1), T::c(c.beta2));
        let decay = T::c(1.0 - lr * c.weight_decay);
        let lr_t = T::c(lr);
        let (bc1, bc2, eps) = (T::c(bc1), T::c(bc2), T::c(c.eps));

        for set in sets.iter_mut() {
            for i in 0..set.len() {
                let key = set.key(i);
                let param = &mut set.params_mut()[i];
                if !param.trainable {
                    continue;
                }
                let g = &grads[&key];
                let n = param.value.len();
                let mo = self.moments.entry(key).or_insert_with(|| Moments {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                });
                let theta = param.value.data_mut();
                for (((t, &gj), m), v) in theta.iter_mut().zip(g.data()).zip(&mut mo.m).zip(&mut mo.v) {
                    *t *= decay;
                    *m = b1 * *m + (T::one() - b1) * gj;
                    *v = b2 * *v + (T::one() - b2) * gj * gj;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *t -= lr_t * m_hat / (v_hat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` over `warmup_steps`, constant afterwards.
pub fn warmup_lr(step: u64, base_lr: f64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        return base_lr;
    }
    base_lr * (step as f64 / warmup_steps as f64).min(1.0)
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<T: Scalar>(grads: &mut Grads<T>, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| {
            let v = x.to_f64_lossy();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = T::c(max_norm / norm);
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}
