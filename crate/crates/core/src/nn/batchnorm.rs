//! Batch normalization over the channel axis of (B, C, H, W) tensors.

use ndarray::{Array1, ArrayD, IxDyn};

use super::param::{Param, ParamKind};
use super::Tensor4;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor4,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    /// Fraction of the new batch statistic blended into the running statistic.
    pub momentum: f64,
    cache: Option<BnCache>,
}

impl BatchNorm2d {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Param::new(
                format!("{name}.gamma"),
                ParamKind::BatchNorm,
                ArrayD::from_elem(IxDyn(&[channels]), 1.0),
            ),
            beta: Param::new(
                format!("{name}.beta"),
                ParamKind::BatchNorm,
                ArrayD::zeros(IxDyn(&[channels])),
            ),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let (b, c, h, w) = x.dim();
        if c != self.channels() {
            return Err(Error::shape(format!(
                "{}: input has {c} channels, expected {}",
                self.gamma.name,
                self.channels()
            )));
        }
        let n = (b * h * w) as f64;
        let mut y = Tensor4::zeros((b, c, h, w));
        if train {
            let mut x_hat = Tensor4::zeros((b, c, h, w));
            let mut inv_std = Array1::zeros(c);
            for ci in 0..c {
                let ch = x.index_axis(ndarray::Axis(1), ci);
                let mean = ch.sum() / n;
                let var = ch.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let istd = 1.0 / (var + self.eps).sqrt();
                inv_std[ci] = istd;
                let g = self.gamma.value[ci];
                let bb = self.beta.value[ci];
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            let xh = (x[(bi, ci, hi, wi)] - mean) * istd;
                            x_hat[(bi, ci, hi, wi)] = xh;
                            y[(bi, ci, hi, wi)] = g * xh + bb;
                        }
                    }
                }
                self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
                self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
            }
            self.cache = Some(BnCache { x_hat, inv_std });
        } else {
            for ci in 0..c {
                let mean = self.running_mean[ci];
                let istd = 1.0 / (self.running_var[ci] + self.eps).sqrt();
                let g = self.gamma.value[ci];
                let bb = self.beta.value[ci];
                for bi in 0..b {
                    for hi in 0..h {
                        for wi in 0..w {
                            y[(bi, ci, hi, wi)] = g * (x[(bi, ci, hi, wi)] - mean) * istd + bb;
                        }
                    }
                }
            }
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invariant(format!("{}: backward without train forward", self.gamma.name)))?;
        let (b, c, h, w) = gy.dim();
        let n = (b * h * w) as f64;
        let mut gx = Tensor4::zeros((b, c, h, w));
        for ci in 0..c {
            let mut sum_gy = 0.0;
            let mut sum_gy_xhat = 0.0;
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        let g = gy[(bi, ci, hi, wi)];
                        sum_gy += g;
                        sum_gy_xhat += g * cache.x_hat[(bi, ci, hi, wi)];
                    }
                }
            }
            self.beta.grad[ci] += sum_gy;
            self.gamma.grad[ci] += sum_gy_xhat;
            let g = self.gamma.value[ci];
            let istd = cache.inv_std[ci];
            for bi in 0..b {
                for hi in 0..h {
                    for wi in 0..w {
                        let xh = cache.x_hat[(bi, ci, hi, wi)];
                        gx[(bi, ci, hi, wi)] = g * istd / n
                            * (n * gy[(bi, ci, hi, wi)] - sum_gy - xh * sum_gy_xhat);
                    }
                }
            }
        }
        Ok(gx)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    /// Non-trainable state (running statistics), named for checkpoints.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Array1<f64>)) {
        let base = self.gamma.name.trim_end_matches(".gamma").to_string();
        f(&format!("{base}.running_mean"), &mut self.running_mean);
        f(&format!("{base}.running_var"), &mut self.running_var);
    }
}
