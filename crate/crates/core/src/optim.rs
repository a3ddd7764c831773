//! Adam and the stepwise learning-rate schedule.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn for_params(params: &[&Tensor]) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            got: grads.len(),
        });
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::DimensionMismatch {
                expected: p.len(),
                got: g.len(),
            });
        }
    }
    state.step += 1;
    let t = state.step as f64;
    let c1 = 1.0 - libm::pow(cfg.beta1, t);
    let c2 = 1.0 - libm::pow(cfg.beta2, t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
            let mhat = m[k] / c1;
            let vhat = v[k] / c2;
            *w -= lr * mhat / (libm::sqrt(vhat) + cfg.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = libm::sqrt(grads.iter().map(Tensor::sum_sq).sum());
    if norm > max_norm && norm > 0.0 {
        let k = max_norm / norm;
        for g in grads {
            g.scale_assign(k);
        }
    }
    norm
}

/// Piecewise-constant learning rate: `initial` until the first drop, then
/// each drop's rate from its step on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    #[serde(default)]
    pub drops: Vec<LrDrop>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrDrop {
    pub at_step: u64,
    pub lr: f64,
}

impl LrSchedule {
    pub fn constant(lr: f64) -> Self {
        Self {
            initial: lr,
            drops: Vec::new(),
        }
    }

    pub fn two_phase(initial: f64, at_step: u64, lr: f64) -> Self {
        Self {
            initial,
            drops: alloc::vec![LrDrop { at_step, lr }],
        }
    }

    /// Rate for 0-based `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        self.drops
            .iter()
            .take_while(|d| d.at_step <= step)
            .last()
            .map_or(self.initial, |d| d.lr)
    }

    pub fn validate(&self) -> Result<()> {
        let rates = core::iter::once(self.initial).chain(self.drops.iter().map(|d| d.lr));
        for r in rates {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::InvalidConfig("learning rates must be positive".into()));
            }
        }
        if self.drops.windows(2).any(|w| w[0].at_step >= w[1].at_step) {
            return Err(Error::InvalidConfig("schedule breakpoints must increase".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = AdamState::for_params(&[&p]);
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 3)], &mut st, 0.1, &AdamConfig::default()).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = Tensor::zeros(1, 3);
        let g = Tensor::from_vec(1, 3, vec![3.0, -0.01, 1e-3]);
        let mut st = AdamState::for_params(&[&p]);
        adam_step(&mut [&mut p], core::slice::from_ref(&g), &mut st, 0.01, &AdamConfig::default()).unwrap();
        for (w, gi) in p.data().iter().zip(g.data()) {
            // mhat = g, vhat = g², so the step is lr·g/(|g| + ε)
            let expect = -0.01 * gi / (gi.abs() + 1e-8);
            assert!((w - expect).abs() < 1e-15);
            assert!((w.abs() - 0.01).abs() < 1e-6);
        }
    }

    #[test]
    fn schedule_steps() {
        let s = LrSchedule::two_phase(2e-4, 25_000, 2e-5);
        assert_eq!(s.lr_at(0), 2e-4);
        assert_eq!(s.lr_at(24_999), 2e-4);
        assert_eq!(s.lr_at(25_000), 2e-5);
        s.validate().unwrap();
        let bad = LrSchedule {
            initial: 1.0,
            drops: vec![LrDrop { at_step: 5, lr: 0.1 }, LrDrop { at_step: 5, lr: 0.01 }],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![Tensor::from_vec(1, 2, vec![3.0, 4.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-15);
    }
}
