//! 2-D convolution via im2col + GEMM, with a naive reference implementation
//! used by the tests.

use ndarray::{Array2, Array4, ArrayD, Ix4};

use super::param::{Param, ParamKind};
use super::Tensor4;
use crate::error::{Error, Result};

/// Output spatial size for one dimension.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds a batch into the im2col matrix of shape
/// `(C*S*S, B*H_out*W_out)`; column `b*H_out*W_out + p` holds the receptive
/// field of output pixel `p` of sample `b`.
pub fn im2col(x: &Tensor4, s: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (b, c, h, w) = x.dim();
    let ho = conv_out_dim(h, s, stride, pad);
    let wo = conv_out_dim(w, s, stride, pad);
    let mut cols = Array2::<f64>::zeros((c * s * s, b * ho * wo));
    for bi in 0..b {
        for ci in 0..c {
            for ki in 0..s {
                for kj in 0..s {
                    let row = ci * s * s + ki * s + kj;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            cols[(row, bi * ho * wo + oi * wo + oj)] =
                                x[(bi, ci, ii as usize, jj as usize)];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-adds columns back into an input-shaped
/// tensor.
pub fn col2im(
    cols: &Array2<f64>,
    batch: usize,
    c: usize,
    h: usize,
    w: usize,
    s: usize,
    stride: usize,
    pad: usize,
) -> Tensor4 {
    let ho = conv_out_dim(h, s, stride, pad);
    let wo = conv_out_dim(w, s, stride, pad);
    let mut x = Tensor4::zeros((batch, c, h, w));
    for bi in 0..batch {
        for ci in 0..c {
            for ki in 0..s {
                for kj in 0..s {
                    let row = ci * s * s + ki * s + kj;
                    for oi in 0..ho {
                        let ii = (oi * stride + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for oj in 0..wo {
                            let jj = (oj * stride + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            x[(bi, ci, ii as usize, jj as usize)] +=
                                cols[(row, bi * ho * wo + oi * wo + oj)];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Functional batched convolution used by both `Conv2d` and the virtual
/// attention layer.
pub fn conv2d_forward(x: &Tensor4, weight: &Array4<f64>, stride: usize, pad: usize) -> Tensor4 {
    let (b, _, h, w) = x.dim();
    let (c_out, _, s, _) = weight.dim();
    let ho = conv_out_dim(h, s, stride, pad);
    let wo = conv_out_dim(w, s, stride, pad);
    let cols = im2col(x, s, stride, pad);
    let w2 = weight
        .view()
        .into_shape_with_order((c_out, weight.len() / c_out))
        .expect("contiguous filter bank");
    let y2 = w2.dot(&cols); // (C_out, B*Ho*Wo)
    let mut y = Tensor4::zeros((b, c_out, ho, wo));
    for bi in 0..b {
        for co in 0..c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    y[(bi, co, oi, oj)] = y2[(co, bi * ho * wo + oi * wo + oj)];
                }
            }
        }
    }
    y
}

/// Gradients of [`conv2d_forward`]: returns (d_input, d_weight).
pub fn conv2d_backward(
    x: &Tensor4,
    weight: &Array4<f64>,
    stride: usize,
    pad: usize,
    gy: &Tensor4,
) -> (Tensor4, Array4<f64>) {
    let (b, c_in, h, w) = x.dim();
    let (c_out, _, s, _) = weight.dim();
    let (_, _, ho, wo) = gy.dim();
    // Flatten gy to (C_out, B*Ho*Wo) matching the im2col column order.
    let mut gy2 = Array2::<f64>::zeros((c_out, b * ho * wo));
    for bi in 0..b {
        for co in 0..c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    gy2[(co, bi * ho * wo + oi * wo + oj)] = gy[(bi, co, oi, oj)];
                }
            }
        }
    }
    let cols = im2col(x, s, stride, pad);
    let dw2 = gy2.dot(&cols.t()); // (C_out, C_in*S*S)
    let dw = dw2
        .into_shape_with_order((c_out, c_in, s, s))
        .expect("weight gradient shape");
    let w2 = weight
        .view()
        .into_shape_with_order((c_out, c_in * s * s))
        .expect("contiguous filter bank");
    let dcols = w2.t().dot(&gy2); // (C_in*S*S, B*Ho*Wo)
    let dx = col2im(&dcols, b, c_in, h, w, s, stride, pad);
    (dx, dw)
}

/// Naive direct convolution; test oracle for the im2col path.
pub fn conv2d_reference(x: &Tensor4, weight: &Array4<f64>, stride: usize, pad: usize) -> Tensor4 {
    let (b, c_in, h, w) = x.dim();
    let (c_out, _, s, _) = weight.dim();
    let ho = conv_out_dim(h, s, stride, pad);
    let wo = conv_out_dim(w, s, stride, pad);
    let mut y = Tensor4::zeros((b, c_out, ho, wo));
    for bi in 0..b {
        for co in 0..c_out {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..c_in {
                        for ki in 0..s {
                            let ii = (oi * stride + ki) as isize - pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            for kj in 0..s {
                                let jj = (oj * stride + kj) as isize - pad as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                acc += x[(bi, ci, ii as usize, jj as usize)]
                                    * weight[(co, ci, ki, kj)];
                            }
                        }
                    }
                    y[(bi, co, oi, oj)] = acc;
                }
            }
        }
    }
    y
}

/// Plain trainable convolution layer.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Param,
    pub b: Option<Param>,
    pub stride: usize,
    pub pad: usize,
    cache_x: Option<Tensor4>,
}

impl Conv2d {
    pub fn new(name: &str, weight: Array4<f64>, bias: Option<Vec<f64>>, stride: usize, pad: usize) -> Self {
        let b = bias.map(|bv| {
            Param::new(
                format!("{name}.b"),
                ParamKind::Bias,
                ArrayD::from_shape_vec(ndarray::IxDyn(&[bv.len()]), bv).expect("bias shape"),
            )
        });
        Self {
            w: Param::new(format!("{name}.w"), ParamKind::Weight, weight.into_dyn()),
            b,
            stride,
            pad,
            cache_x: None,
        }
    }

    pub fn weight_view(&self) -> ndarray::ArrayView4<'_, f64> {
        self.w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("conv weight is 4-d")
    }

    pub fn out_channels(&self) -> usize {
        self.weight_view().dim().0
    }

    pub fn in_channels(&self) -> usize {
        self.weight_view().dim().1
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let (_, c_in, _, _) = x.dim();
        if c_in != self.in_channels() {
            return Err(Error::shape(format!(
                "{}: input has {c_in} channels, expected {}",
                self.w.name,
                self.in_channels()
            )));
        }
        let weight = self.weight_view().to_owned();
        let mut y = conv2d_forward(x, &weight, self.stride, self.pad);
        if let Some(b) = &self.b {
            for (co, &bv) in b.value.iter().enumerate() {
                y.index_axis_mut(ndarray::Axis(1), co).mapv_inplace(|v| v + bv);
            }
        }
        self.cache_x = if train { Some(x.clone()) } else { None };
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| Error::invariant(format!("{}: backward without forward", self.w.name)))?;
        let weight = self.weight_view().to_owned();
        let (dx, dw) = conv2d_backward(x, &weight, self.stride, self.pad, gy);
        self.w.grad += &dw.into_dyn();
        if let Some(b) = &mut self.b {
            let (bs, c_out, ho, wo) = gy.dim();
            for co in 0..c_out {
                let mut acc = 0.0;
                for bi in 0..bs {
                    for oi in 0..ho {
                        for oj in 0..wo {
                            acc += gy[(bi, co, oi, oj)];
                        }
                    }
                }
                b.grad[co] += acc;
            }
        }
        Ok(dx)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        if let Some(b) = &mut self.b {
            f(b);
        }
    }
}
