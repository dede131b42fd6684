//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{lit, Float, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer state bound to the slot layout of one [`ParamStore`].
///
/// Moments start at zero and `t` counts completed steps.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub config: AdamWConfig,
    t: u64,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamWConfig, store: &ParamStore<F>) -> Self {
        let zeros = |p: &super::Parameter<F>| {
            if p.trainable {
                vec![F::zero(); p.value.numel()]
            } else {
                Vec::new()
            }
        };
        Self {
            config,
            t: 0,
            m: store.iter().map(zeros).collect(),
            v: store.iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self, slot: usize) -> &[F] {
        &self.m[slot]
    }

    pub fn second_moment(&self, slot: usize) -> &[F] {
        &self.v[slot]
    }

    /// Applies one update to every trainable parameter and consumes its
    /// gradient slot.
    ///
    /// `w ← w − lr·m̂/(√v̂+ε) − lr·wd·w`, with bias-corrected moments.
    pub fn step(&mut self, store: &mut ParamStore<F>) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::invalid("optimizer state does not match the parameter store"));
        }
        if let Some(p) = store.iter().find(|p| p.trainable && p.value.grad().is_none()) {
            return Err(Error::MissingGradient(p.name.clone()));
        }
        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (lit::<F>(c.beta1), lit::<F>(c.beta2));
        let bc1 = lit::<F>(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = lit::<F>(1.0 - c.beta2.powi(self.t as i32));
        let (lr, wd, eps) = (lit::<F>(c.lr), lit::<F>(c.weight_decay), lit::<F>(c.eps));
        for (slot, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let grad = p.value.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (F::one() - b1) * *g;
                *v = b2 * *v + (F::one() - b2) * *g * *g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w = *w - lr * (m_hat / (v_hat.sqrt() + eps)) - lr * wd * *w;
            }
            p.value.clear_grad();
        }
        Ok(())
    }
}
