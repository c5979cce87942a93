//! AdamW with a constant learning rate.

use serde::{Deserialize, Serialize};

/// Scalars the optimizer can update in place.
pub trait Scalar: Copy {
    fn to_f64(self) -> f64;
    fn from_f64(v: f64) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamWConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamWConfig {
            learning_rate,
            ..Default::default()
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
    decay: bool,
}

/// Optimizer state over an ordered list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: AdamWConfig,
    step: u64,
    slots: Vec<Moments>,
}

impl AdamW {
    /// `shapes[i] = (len, apply_weight_decay)` for parameter tensor `i`.
    pub fn new(cfg: AdamWConfig, shapes: &[(usize, bool)]) -> Self {
        AdamW {
            cfg,
            step: 0,
            slots: shapes
                .iter()
                .map(|&(n, decay)| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                    decay,
                })
                .collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Advances the step counter. Call once before updating each tensor.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Updates parameter tensor `slot` in place from its gradient.
    pub fn update<T: Scalar>(&mut self, slot: usize, param: &mut [T], grad: &[T]) {
        let AdamWConfig {
            learning_rate: lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let s = &mut self.slots[slot];
        debug_assert_eq!(param.len(), s.m.len());
        let decay = if s.decay { lr * weight_decay } else { 0.0 };
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut s.m).zip(&mut s.v) {
            let g = g.to_f64();
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let shrink = decay * p.to_f64();
            let step = lr * m_hat / (v_hat.sqrt() + eps);
            // Zero updates must not touch the stored bits (e.g. -0.0).
            if shrink != 0.0 || step != 0.0 {
                *p = T::from_f64(p.to_f64() - shrink - step);
            }
        }
    }
}
