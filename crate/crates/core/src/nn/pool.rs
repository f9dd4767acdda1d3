//! 2x2 max pooling and global average pooling.

use ndarray::Array2;

use super::Tensor4;
use crate::error::{Error, Result};

/// 2x2 max pooling with stride 2; input height/width must be even.
#[derive(Debug, Clone, Default)]
pub struct MaxPool2 {
    argmax: Option<Vec<(usize, usize)>>,
    in_shape: Option<(usize, usize, usize, usize)>,
}

impl MaxPool2 {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let (b, c, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max pool needs even spatial dims, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut y = Tensor4::zeros((b, c, ho, wo));
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = (oi * 2, oj * 2);
                        for di in 0..2 {
                            for dj in 0..2 {
                                let v = x[(bi, ci, oi * 2 + di, oj * 2 + dj)];
                                if v > best {
                                    best = v;
                                    best_idx = (oi * 2 + di, oj * 2 + dj);
                                }
                            }
                        }
                        y[(bi, ci, oi, oj)] = best;
                        argmax.push(best_idx);
                    }
                }
            }
        }
        if train {
            self.argmax = Some(argmax);
            self.in_shape = Some((b, c, h, w));
        }
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let argmax = self
            .argmax
            .as_ref()
            .ok_or_else(|| Error::invariant("max pool backward without forward"))?;
        let (b, c, h, w) = self
            .in_shape
            .ok_or_else(|| Error::invariant("max pool backward without forward"))?;
        let (_, _, ho, wo) = gy.dim();
        let mut gx = Tensor4::zeros((b, c, h, w));
        let mut it = argmax.iter();
        for bi in 0..b {
            for ci in 0..c {
                for oi in 0..ho {
                    for oj in 0..wo {
                        let &(ii, jj) = it.next().expect("argmax cache size");
                        gx[(bi, ci, ii, jj)] += gy[(bi, ci, oi, oj)];
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Global average pooling: (B, C, H, W) -> (B, C).
pub fn global_avg_pool(x: &Tensor4) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let n = (h * w) as f64;
    Array2::from_shape_fn((b, c), |(bi, ci)| {
        x.index_axis(ndarray::Axis(0), bi)
            .index_axis(ndarray::Axis(0), ci)
            .sum()
            / n
    })
}

/// Backward of [`global_avg_pool`]: spreads each gradient uniformly.
pub fn global_avg_pool_backward(gy: &Array2<f64>, h: usize, w: usize) -> Tensor4 {
    let (b, c) = gy.dim();
    let n = (h * w) as f64;
    Tensor4::from_shape_fn((b, c, h, w), |(bi, ci, _, _)| gy[(bi, ci)] / n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_pool_picks_maxima_and_routes_gradients() {
        let mut x = Tensor4::zeros((1, 1, 4, 4));
        x[(0, 0, 0, 1)] = 5.0;
        x[(0, 0, 2, 2)] = 3.0;
        x[(0, 0, 1, 3)] = 2.0;
        let mut pool = MaxPool2::new();
        let y = pool.forward(&x, true).unwrap();
        assert_eq!(y.dim(), (1, 1, 2, 2));
        assert_eq!(y[(0, 0, 0, 0)], 5.0);
        assert_eq!(y[(0, 0, 1, 1)], 3.0);

        let gy = Tensor4::from_elem((1, 1, 2, 2), 1.0);
        let gx = pool.backward(&gy).unwrap();
        assert_eq!(gx[(0, 0, 0, 1)], 1.0);
        assert_eq!(gx[(0, 0, 2, 2)], 1.0);
        assert_eq!(gx.sum(), 4.0);
    }

    #[test]
    fn max_pool_rejects_odd_dims() {
        let x = Tensor4::zeros((1, 1, 3, 4));
        assert!(MaxPool2::new().forward(&x, false).is_err());
    }

    #[test]
    fn gap_and_backward() {
        let x = Tensor4::from_shape_fn((2, 3, 2, 2), |(b, c, h, w)| (b + c + h + w) as f64);
        let y = global_avg_pool(&x);
        assert_eq!(y.dim(), (2, 3));
        assert!((y[(0, 0)] - 1.0).abs() < 1e-12); // mean of 0,1,1,2
        let gy = Array2::from_elem((2, 3), 1.0);
        let gx = global_avg_pool_backward(&gy, 2, 2);
        assert!(gx.iter().all(|&v| (v - 0.25).abs() < 1e-12));
    }
}
