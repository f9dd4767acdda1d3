//! Fully connected layer on (B, features) matrices.

use ndarray::{Array2, ArrayD, Ix1, Ix2, IxDyn};

use super::param::{Param, ParamKind};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Linear {
    /// Weight of shape (out, in).
    pub w: Param,
    pub b: Param,
    cache_x: Option<Array2<f64>>,
}

impl Linear {
    pub fn new(name: &str, weight: Array2<f64>, bias: Vec<f64>) -> Self {
        Self {
            w: Param::new(format!("{name}.w"), ParamKind::Weight, weight.into_dyn()),
            b: Param::new(
                format!("{name}.b"),
                ParamKind::Bias,
                ArrayD::from_shape_vec(IxDyn(&[bias.len()]), bias).expect("bias shape"),
            ),
            cache_x: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.w.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.w.value.shape()[0]
    }

    pub fn forward(&mut self, x: &Array2<f64>, train: bool) -> Result<Array2<f64>> {
        if x.ncols() != self.in_features() {
            return Err(Error::shape(format!(
                "{}: input has {} features, expected {}",
                self.w.name,
                x.ncols(),
                self.in_features()
            )));
        }
        let w = self.w.value.view().into_dimensionality::<Ix2>().expect("2-d weight");
        let b = self.b.value.view().into_dimensionality::<Ix1>().expect("1-d bias");
        let mut y = x.dot(&w.t());
        for mut row in y.rows_mut() {
            row += &b;
        }
        self.cache_x = if train { Some(x.clone()) } else { None };
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Array2<f64>) -> Result<Array2<f64>> {
        let x = self
            .cache_x
            .as_ref()
            .ok_or_else(|| Error::invariant(format!("{}: backward without forward", self.w.name)))?;
        let dw = gy.t().dot(x); // (out, in)
        self.w.grad += &dw.into_dyn();
        let db = gy.sum_axis(ndarray::Axis(0));
        self.b.grad += &db.into_dyn();
        let w = self.w.value.view().into_dimensionality::<Ix2>().expect("2-d weight");
        Ok(gy.dot(&w))
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn forward_matches_manual() {
        let w = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.5]).unwrap();
        let mut l = Linear::new("fc", w, vec![0.5, -0.5]);
        let x = Array2::from_shape_vec((1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        let y = l.forward(&x, false).unwrap();
        assert!((y[(0, 0)] - (1.0 - 3.0 + 0.5)).abs() < 1e-12);
        assert!((y[(0, 1)] - (2.0 + 2.0 + 1.5 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let w = Array2::from_shape_fn((3, 4), |_| rng.gen_range(-1.0..1.0));
        let x = Array2::from_shape_fn((2, 4), |_| rng.gen_range(-1.0..1.0));
        let probe = Array2::from_shape_fn((2, 3), |_| rng.gen_range(-1.0..1.0));
        let mut l = Linear::new("fc", w.clone(), vec![0.1, -0.2, 0.3]);
        let _ = l.forward(&x, true).unwrap();
        let gx = l.backward(&probe).unwrap();

        let h = 1e-5;
        let loss = |l: &mut Linear, x: &Array2<f64>| (&l.forward(x, false).unwrap() * &probe).sum();
        for idx in [(0, 0), (1, 3), (2, 2)] {
            let mut lp = l.clone();
            let mut lm = l.clone();
            lp.w.value[[idx.0, idx.1]] += h;
            lm.w.value[[idx.0, idx.1]] -= h;
            let num = (loss(&mut lp, &x) - loss(&mut lm, &x)) / (2.0 * h);
            assert!(rel_err(l.w.grad[[idx.0, idx.1]], num) < 1e-6);
        }
        for idx in [(0, 0), (1, 2)] {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[idx] += h;
            xm[idx] -= h;
            let mut lc = l.clone();
            let num = (loss(&mut lc, &xp) - loss(&mut lc, &xm)) / (2.0 * h);
            assert!(rel_err(gx[idx], num) < 1e-6);
        }
    }
}
