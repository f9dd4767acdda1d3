//! ReLU activation with cached mask.

use super::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Tensor4>,
}

impl Relu {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Tensor4 {
        let y = x.mapv(|v| v.max(0.0));
        if train {
            self.mask = Some(x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }));
        }
        y
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let mask = self
            .mask
            .as_ref()
            .ok_or_else(|| Error::invariant("relu backward without forward"))?;
        Ok(gy * mask)
    }
}
