//! Momentum SGD with two parameter groups: weights and attention logits.

use serde::{Deserialize, Serialize};

use super::param::{Param, ParamKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr_weights: f64,
    pub lr_attention: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            lr_weights: 0.05,
            lr_attention: 0.01,
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

/// Stateless stepper; momentum buffers live inside each [`Param`].
#[derive(Debug, Clone)]
pub struct Sgd {
    pub cfg: SgdConfig,
    /// Multiplier applied to both learning rates (decayed by the schedule).
    pub lr_scale: f64,
}

impl Sgd {
    pub fn new(cfg: SgdConfig) -> Self {
        Self { cfg, lr_scale: 1.0 }
    }

    /// v = momentum * v + grad + wd * w;  w -= lr * v.
    /// Attention logits use `lr_attention` and no weight decay.
    pub fn update(&self, p: &mut Param) {
        let (lr, wd) = match p.kind {
            ParamKind::Attention => (self.cfg.lr_attention, 0.0),
            _ => (self.cfg.lr_weights, self.cfg.weight_decay),
        };
        let lr = lr * self.lr_scale;
        let momentum = self.cfg.momentum;
        for ((v, g), w) in p
            .velocity
            .iter_mut()
            .zip(p.grad.iter())
            .zip(p.value.iter_mut())
        {
            *v = momentum * *v + *g + wd * *w;
            *w -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    fn scalar_param(kind: ParamKind, value: f64, grad: f64) -> Param {
        let mut p = Param::new("p", kind, ArrayD::from_elem(IxDyn(&[1]), value));
        p.grad[0] = grad;
        p
    }

    #[test]
    fn weight_step_applies_decay_and_momentum() {
        let cfg = SgdConfig {
            lr_weights: 0.1,
            lr_attention: 0.01,
            momentum: 0.9,
            weight_decay: 0.5,
        };
        let sgd = Sgd::new(cfg);
        let mut p = scalar_param(ParamKind::Weight, 2.0, 1.0);
        sgd.update(&mut p);
        // v = 1 + 0.5*2 = 2; w = 2 - 0.1*2 = 1.8
        assert!((p.value[0] - 1.8).abs() < 1e-12);
        p.grad[0] = 0.0;
        sgd.update(&mut p);
        // v = 0.9*2 + 0.5*1.8 = 2.7; w = 1.8 - 0.27 = 1.53
        assert!((p.value[0] - 1.53).abs() < 1e-12);
    }

    #[test]
    fn attention_step_skips_decay_and_uses_own_lr() {
        let sgd = Sgd::new(SgdConfig {
            lr_weights: 0.1,
            lr_attention: 0.01,
            momentum: 0.0,
            weight_decay: 0.5,
        });
        let mut p = scalar_param(ParamKind::Attention, 2.0, 1.0);
        sgd.update(&mut p);
        // No decay: v = 1; w = 2 - 0.01.
        assert!((p.value[0] - 1.99).abs() < 1e-12);
    }

    #[test]
    fn lr_scale_decays_step_size() {
        let mut sgd = Sgd::new(SgdConfig {
            lr_weights: 0.1,
            lr_attention: 0.01,
            momentum: 0.0,
            weight_decay: 0.0,
        });
        sgd.lr_scale = 0.1;
        let mut p = scalar_param(ParamKind::Weight, 1.0, 1.0);
        sgd.update(&mut p);
        assert!((p.value[0] - 0.99).abs() < 1e-12);
    }
}
