//! Trainable parameter with gradient and momentum state.

use ndarray::ArrayD;

/// Parameter role, used for optimizer grouping: attention logits get their own
/// learning rate and are excluded from weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Convolution / linear weights.
    Weight,
    /// Additive biases.
    Bias,
    /// Batch-norm scale (gamma) and shift (beta).
    BatchNorm,
    /// Attention logits.
    Attention,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: ArrayD<f64>,
    pub grad: ArrayD<f64>,
    pub velocity: ArrayD<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, value: ArrayD<f64>) -> Self {
        let grad = ArrayD::zeros(value.raw_dim());
        let velocity = ArrayD::zeros(value.raw_dim());
        Self {
            name: name.into(),
            kind,
            value,
            grad,
            velocity,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Visitor alias used by models to expose their parameters in a fixed,
/// deterministic order.
pub type ParamVisitor<'a> = dyn FnMut(&mut Param) + 'a;
