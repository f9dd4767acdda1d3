//! Virtual attention convolution: a convolution whose filter bank is viewed
//! as N output blocks x M input groups, with one trainable attention gate per
//! output block mixing the group convolutions.
//!
//! Two implementations are provided: [`vam_forward`] computes the definition
//! directly (group-by-group convolutions, then the attention-weighted sum),
//! while [`VamLayer::forward`] scales the dense filter bank by the attention
//! weights and runs one dense convolution — algebraically identical but at
//! dense-convolution cost.

use ndarray::{s, Array2, Array3, Array4, Ix4};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionRecord, FeatureMap};
use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_backward, conv2d_forward, conv_out_dim};
use crate::nn::{init, Param, ParamKind, Tensor4};
use crate::types::argmax;

/// Structural description of a virtual attention convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VamLayerSpec {
    pub c_in: usize,
    pub c_out: usize,
    /// Square kernel size.
    pub s: usize,
    /// Input virtual groups.
    pub m: usize,
    /// Output virtual blocks.
    pub n: usize,
    pub stride: usize,
    pub pad: usize,
}

impl VamLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::invalid_argument("M and N must be >= 1"));
        }
        if self.c_in % self.m != 0 {
            return Err(Error::invalid_argument(format!(
                "M = {} does not divide C_in = {}",
                self.m, self.c_in
            )));
        }
        if self.c_out % self.n != 0 {
            return Err(Error::invalid_argument(format!(
                "N = {} does not divide C_out = {}",
                self.n, self.c_out
            )));
        }
        if self.s == 0 || self.stride == 0 {
            return Err(Error::invalid_argument("kernel size and stride must be >= 1"));
        }
        Ok(())
    }

    pub fn group_in(&self) -> usize {
        self.c_in / self.m
    }

    pub fn block_out(&self) -> usize {
        self.c_out / self.n
    }
}

/// Trainable virtual attention convolution layer (bias-free; wrapped
/// convolutions are always followed by batch norm).
#[derive(Debug, Clone)]
pub struct VamLayer {
    pub spec: VamLayerSpec,
    /// Dense filter bank (C_out, C_in, S, S); block (j, l) is the slab
    /// `[j*C_out/N .. , l*C_in/M .. ]`.
    pub w: Param,
    /// Attention logits, shape (N, M): row j gates output block j.
    pub att: Param,
    /// When set, each gate reports the one-hot argmax of its logits.
    pub hardened: bool,
    cache: Option<VamCache>,
}

#[derive(Debug, Clone)]
struct VamCache {
    x: Tensor4,
    a: Array2<f64>,
    scaled: Array4<f64>,
}

impl VamLayer {
    pub fn new(name: &str, spec: VamLayerSpec, weight: Array4<f64>, att_logits: Array2<f64>) -> Result<Self> {
        spec.validate()?;
        if weight.dim() != (spec.c_out, spec.c_in, spec.s, spec.s) {
            return Err(Error::shape(format!(
                "filter bank shape {:?} does not match spec {:?}",
                weight.dim(),
                spec
            )));
        }
        if att_logits.dim() != (spec.n, spec.m) {
            return Err(Error::shape(format!(
                "attention logits shape {:?}, expected ({}, {})",
                att_logits.dim(),
                spec.n,
                spec.m
            )));
        }
        Ok(Self {
            spec,
            w: Param::new(format!("{name}.w"), ParamKind::Weight, weight.into_dyn()),
            att: Param::new(format!("{name}.att"), ParamKind::Attention, att_logits.into_dyn()),
            hardened: false,
            cache: None,
        })
    }

    /// Fresh layer with He-normal filters and N(0, 0.01) attention logits.
    /// Attention draws come from their own stream so the weight stream is the
    /// same as an unwrapped convolution's.
    pub fn init(
        name: &str,
        spec: VamLayerSpec,
        weight_rng: &mut ChaCha20Rng,
        att_rng: &mut ChaCha20Rng,
    ) -> Result<Self> {
        let w = init::conv_weight(weight_rng, spec.c_out, spec.c_in, spec.s);
        let logits =
            Array2::from_shape_vec((spec.n, spec.m), init::attention_logits(att_rng, spec.n * spec.m))
                .expect("logit shape");
        Self::new(name, spec, w, logits)
    }

    /// Per-output-block attention weights, shape (N, M): softmax over each
    /// row (temperature fixed at 1), or hardened one-hots.
    pub fn attention_matrix(&self) -> Array2<f64> {
        let n = self.spec.n;
        let m = self.spec.m;
        let mut a = Array2::zeros((n, m));
        for j in 0..n {
            let row: Vec<f64> = (0..m).map(|l| self.att.value[[j, l]]).collect();
            if self.hardened {
                a[[j, argmax(&row)]] = 1.0;
            } else {
                let soft = crate::losses::softmax_slice(&row, 1.0);
                for l in 0..m {
                    a[[j, l]] = soft[l];
                }
            }
        }
        a
    }

    /// Dense filter bank scaled slab-wise by the attention weights.
    fn scaled_bank(&self, a: &Array2<f64>) -> Array4<f64> {
        let sp = &self.spec;
        let mut wt = self
            .w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4-d filter bank")
            .to_owned();
        for j in 0..sp.n {
            for l in 0..sp.m {
                let mut slab = wt.slice_mut(s![
                    j * sp.block_out()..(j + 1) * sp.block_out(),
                    l * sp.group_in()..(l + 1) * sp.group_in(),
                    ..,
                    ..
                ]);
                slab.mapv_inplace(|v| v * a[[j, l]]);
            }
        }
        wt
    }

    pub fn forward(&mut self, x: &Tensor4, train: bool) -> Result<Tensor4> {
        let (_, c_in, _, _) = x.dim();
        if c_in != self.spec.c_in {
            return Err(Error::shape(format!(
                "{}: input has {c_in} channels, expected {}",
                self.w.name, self.spec.c_in
            )));
        }
        let a = self.attention_matrix();
        let scaled = self.scaled_bank(&a);
        let y = conv2d_forward(x, &scaled, self.spec.stride, self.spec.pad);
        self.cache = if train {
            Some(VamCache { x: x.clone(), a, scaled })
        } else {
            None
        };
        Ok(y)
    }

    pub fn backward(&mut self, gy: &Tensor4) -> Result<Tensor4> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::invariant(format!("{}: backward without forward", self.w.name)))?;
        let sp = self.spec;
        let (dx, d_scaled) = conv2d_backward(&cache.x, &cache.scaled, sp.stride, sp.pad, gy);
        let w = self
            .w
            .value
            .view()
            .into_dimensionality::<Ix4>()
            .expect("4-d filter bank")
            .to_owned();
        // d filter = a * d scaled (slab-wise); d rho_{j,l} = <d scaled slab, filter slab>.
        let mut d_rho = Array2::<f64>::zeros((sp.n, sp.m));
        {
            let mut wg = self
                .w
                .grad
                .view_mut()
                .into_dimensionality::<Ix4>()
                .expect("4-d grad");
            for j in 0..sp.n {
                for l in 0..sp.m {
                    let rows = j * sp.block_out()..(j + 1) * sp.block_out();
                    let cols = l * sp.group_in()..(l + 1) * sp.group_in();
                    let ds = d_scaled.slice(s![rows.clone(), cols.clone(), .., ..]);
                    let ws = w.slice(s![rows.clone(), cols.clone(), .., ..]);
                    let mut wg_slab = wg.slice_mut(s![rows, cols, .., ..]);
                    wg_slab.scaled_add(cache.a[[j, l]], &ds);
                    d_rho[[j, l]] = (&ds * &ws).sum();
                }
            }
        }
        // Softmax backward per row (temperature 1). Hardened gates are frozen.
        if !self.hardened {
            for j in 0..sp.n {
                let dot: f64 = (0..sp.m).map(|l| cache.a[[j, l]] * d_rho[[j, l]]).sum();
                for l in 0..sp.m {
                    self.att.grad[[j, l]] += cache.a[[j, l]] * (d_rho[[j, l]] - dot);
                }
            }
        }
        Ok(dx)
    }

    pub fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.w);
        f(&mut self.att);
    }

    /// One snapshot record per output block.
    pub fn records(&self, stage: usize, sources: &[String]) -> Vec<AttentionRecord> {
        let a = self.attention_matrix();
        (0..self.spec.n)
            .map(|j| AttentionRecord {
                stage,
                block: j,
                sources: sources.to_vec(),
                logits: (0..self.spec.m).map(|l| self.att.value[[j, l]]).collect(),
                weights: (0..self.spec.m).map(|l| a[[j, l]]).collect(),
            })
            .collect()
    }
}

/// Direct evaluation of the definition on a single (C, H, W) feature map:
/// output block j = sum_m a_{j,m} (F_m conv K_{j,m}), blocks concatenated
/// along channels.
pub fn vam_forward(x: &FeatureMap, layer: &VamLayer) -> Result<FeatureMap> {
    let sp = layer.spec;
    let (c, h, w) = x.dim();
    if c != sp.c_in {
        return Err(Error::shape(format!(
            "vam_forward: input has {c} channels, expected {}",
            sp.c_in
        )));
    }
    let a = layer.attention_matrix();
    let bank = layer
        .w
        .value
        .view()
        .into_dimensionality::<Ix4>()
        .expect("4-d filter bank");
    let ho = conv_out_dim(h, sp.s, sp.stride, sp.pad);
    let wo = conv_out_dim(w, sp.s, sp.stride, sp.pad);
    let mut y = Array3::<f64>::zeros((sp.c_out, ho, wo));
    for j in 0..sp.n {
        for l in 0..sp.m {
            // Group l of the input as a batch-1 tensor.
            let xg = x.slice(s![l * sp.group_in()..(l + 1) * sp.group_in(), .., ..]);
            let mut x4 = Tensor4::zeros((1, sp.group_in(), h, w));
            x4.index_axis_mut(ndarray::Axis(0), 0).assign(&xg);
            let kg = bank
                .slice(s![
                    j * sp.block_out()..(j + 1) * sp.block_out(),
                    l * sp.group_in()..(l + 1) * sp.group_in(),
                    ..,
                    ..
                ])
                .to_owned();
            let part = conv2d_forward(&x4, &kg, sp.stride, sp.pad);
            let mut yj = y.slice_mut(s![j * sp.block_out()..(j + 1) * sp.block_out(), .., ..]);
            yj.scaled_add(a[[j, l]], &part.index_axis(ndarray::Axis(0), 0));
        }
    }
    Ok(y)
}

/// Plain dense convolution with the concatenated filter bank; the test oracle
/// for the equivalence identities.
pub fn dense_equivalent_output(x: &FeatureMap, layer: &VamLayer) -> Result<FeatureMap> {
    let sp = layer.spec;
    let (c, h, w) = x.dim();
    if c != sp.c_in {
        return Err(Error::shape(format!(
            "dense_equivalent_output: input has {c} channels, expected {}",
            sp.c_in
        )));
    }
    let bank = layer
        .w
        .value
        .view()
        .into_dimensionality::<Ix4>()
        .expect("4-d filter bank")
        .to_owned();
    let mut x4 = Tensor4::zeros((1, c, h, w));
    x4.index_axis_mut(ndarray::Axis(0), 0).assign(x);
    let y = conv2d_forward(&x4, &bank, sp.stride, sp.pad);
    Ok(y.index_axis(ndarray::Axis(0), 0).to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rel_err;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn random_layer(rng: &mut ChaCha20Rng, spec: VamLayerSpec) -> VamLayer {
        let w = Array4::from_shape_fn((spec.c_out, spec.c_in, spec.s, spec.s), |_| {
            rng.gen_range(-0.6..0.6)
        });
        let att = Array2::from_shape_fn((spec.n, spec.m), |_| rng.gen_range(-0.8..0.8));
        VamLayer::new("vam", spec, w, att).unwrap()
    }

    fn random_map(rng: &mut ChaCha20Rng, c: usize, h: usize, w: usize) -> FeatureMap {
        Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-1.0..1.0))
    }

    fn max_abs_diff(a: &FeatureMap, b: &FeatureMap) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn spec_validation() {
        let bad = VamLayerSpec { c_in: 6, c_out: 8, s: 3, m: 4, n: 2, stride: 1, pad: 1 };
        assert!(bad.validate().is_err());
        let good = VamLayerSpec { c_in: 8, c_out: 8, s: 3, m: 4, n: 2, stride: 1, pad: 1 };
        assert!(good.validate().is_ok());
    }

    #[test]
    fn m_equals_one_matches_dense_exactly() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let spec = VamLayerSpec { c_in: 3, c_out: 6, s: 3, m: 1, n: 3, stride: 1, pad: 1 };
        let layer = random_layer(&mut rng, spec);
        let x = random_map(&mut rng, 3, 6, 6);
        let a = vam_forward(&x, &layer).unwrap();
        let b = dense_equivalent_output(&x, &layer).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn uniform_attention_is_dense_over_m() {
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        let spec = VamLayerSpec { c_in: 8, c_out: 6, s: 3, m: 4, n: 2, stride: 1, pad: 1 };
        let mut layer = random_layer(&mut rng, spec);
        layer.att.value.fill(0.3); // equal logits -> uniform rows
        let x = random_map(&mut rng, 8, 5, 5);
        let a = vam_forward(&x, &layer).unwrap();
        let mut b = dense_equivalent_output(&x, &layer).unwrap();
        b.mapv_inplace(|v| v / spec.m as f64);
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn one_hot_attention_matches_masked_dense() {
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        let spec = VamLayerSpec { c_in: 6, c_out: 4, s: 3, m: 3, n: 2, stride: 1, pad: 1 };
        let mut layer = random_layer(&mut rng, spec);
        // One-hot at group m* = 1 for every output block, via large logits.
        for j in 0..spec.n {
            for l in 0..spec.m {
                layer.att.value[[j, l]] = if l == 1 { 60.0 } else { 0.0 };
            }
        }
        let x = random_map(&mut rng, 6, 5, 5);
        let a = vam_forward(&x, &layer).unwrap();

        // Oracle: zero all filter columns outside group 1, then dense conv.
        let mut masked = layer.clone();
        {
            let mut w = masked.w.value.view_mut().into_dimensionality::<Ix4>().unwrap();
            for ci in 0..spec.c_in {
                if !(spec.group_in()..2 * spec.group_in()).contains(&ci) {
                    w.slice_mut(s![.., ci, .., ..]).fill(0.0);
                }
            }
        }
        let b = dense_equivalent_output(&x, &masked).unwrap();
        assert!(max_abs_diff(&a, &b) <= 1e-5);
    }

    #[test]
    fn scaled_bank_forward_matches_direct_definition() {
        let mut rng = ChaCha20Rng::seed_from_u64(24);
        for &(c_in, c_out, s, m, n, stride, pad) in &[
            (4usize, 4usize, 3usize, 2usize, 2usize, 1usize, 1usize),
            (6, 9, 3, 3, 3, 1, 1),
            (8, 4, 1, 4, 2, 1, 0),
            (6, 8, 5, 2, 4, 2, 2),
        ] {
            let spec = VamLayerSpec { c_in, c_out, s, m, n, stride, pad };
            let mut layer = random_layer(&mut rng, spec);
            let x = random_map(&mut rng, c_in, 7, 7);
            let direct = vam_forward(&x, &layer).unwrap();
            let mut x4 = Tensor4::zeros((1, c_in, 7, 7));
            x4.index_axis_mut(ndarray::Axis(0), 0).assign(&x);
            let fast = layer.forward(&x4, false).unwrap();
            let fast3 = fast.index_axis(ndarray::Axis(0), 0).to_owned();
            assert!(
                max_abs_diff(&direct, &fast3) <= 1e-10,
                "scaled-bank forward deviates from the definition"
            );
        }
    }

    #[test]
    fn dense_equivalent_is_linear_in_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(25);
        let spec = VamLayerSpec { c_in: 4, c_out: 4, s: 3, m: 2, n: 2, stride: 1, pad: 1 };
        let layer = random_layer(&mut rng, spec);
        let x1 = random_map(&mut rng, 4, 5, 5);
        let x2 = random_map(&mut rng, 4, 5, 5);
        let y1 = dense_equivalent_output(&x1, &layer).unwrap();
        let y2 = dense_equivalent_output(&x2, &layer).unwrap();
        let y12 = dense_equivalent_output(&(&x1 * 2.0 + &x2), &layer).unwrap();
        let expect = &y1 * 2.0 + &y2;
        assert!(max_abs_diff(&y12, &expect) <= 1e-10);
    }

    #[test]
    fn vam_forward_is_linear_in_input() {
        let mut rng = ChaCha20Rng::seed_from_u64(26);
        let spec = VamLayerSpec { c_in: 6, c_out: 6, s: 3, m: 3, n: 2, stride: 1, pad: 1 };
        let layer = random_layer(&mut rng, spec);
        let x1 = random_map(&mut rng, 6, 5, 5);
        let x2 = random_map(&mut rng, 6, 5, 5);
        let y = vam_forward(&(&x1 + &x2), &layer).unwrap();
        let expect = &vam_forward(&x1, &layer).unwrap() + &vam_forward(&x2, &layer).unwrap();
        assert!(max_abs_diff(&y, &expect) <= 1e-10);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 1x4x5x5 input with M = N = 2, checking both filters and logits.
        let mut rng = ChaCha20Rng::seed_from_u64(27);
        let spec = VamLayerSpec { c_in: 4, c_out: 4, s: 3, m: 2, n: 2, stride: 1, pad: 1 };
        let mut layer = random_layer(&mut rng, spec);
        let x = Tensor4::from_shape_fn((1, 4, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let probe = Tensor4::from_shape_fn((1, 4, 5, 5), |_| rng.gen_range(-1.0..1.0));

        let _ = layer.forward(&x, true).unwrap();
        let _ = layer.backward(&probe).unwrap();

        let h = 1e-4;
        let mut eval = |layer: &mut VamLayer| (&layer.forward(&x, false).unwrap() * &probe).sum();
        // All attention logits.
        for j in 0..2 {
            for l in 0..2 {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                lp.att.value[[j, l]] += h;
                lm.att.value[[j, l]] -= h;
                let num = (eval(&mut lp) - eval(&mut lm)) / (2.0 * h);
                let ana = layer.att.grad[[j, l]];
                assert!(
                    rel_err(ana, num) <= 1e-3,
                    "d att[{j},{l}]: analytic {ana} vs numeric {num}"
                );
            }
        }
        // A grid of filter entries.
        for idx in [[0, 0, 0, 0], [1, 2, 1, 1], [3, 3, 2, 2], [2, 1, 0, 2]] {
            let mut lp = layer.clone();
            let mut lm = layer.clone();
            lp.w.value[idx] += h;
            lm.w.value[idx] -= h;
            let num = (eval(&mut lp) - eval(&mut lm)) / (2.0 * h);
            let ana = layer.w.grad[idx];
            assert!(
                rel_err(ana, num) <= 1e-3,
                "d w[{idx:?}]: analytic {ana} vs numeric {num}"
            );
        }
    }

    #[test]
    fn hardened_layer_routes_one_group_and_freezes_attention() {
        let mut rng = ChaCha20Rng::seed_from_u64(28);
        let spec = VamLayerSpec { c_in: 4, c_out: 4, s: 3, m: 2, n: 2, stride: 1, pad: 1 };
        let mut layer = random_layer(&mut rng, spec);
        layer.hardened = true;
        let a = layer.attention_matrix();
        for j in 0..2 {
            let row: Vec<f64> = (0..2).map(|l| a[[j, l]]).collect();
            assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
        }
        let x = Tensor4::from_shape_fn((1, 4, 5, 5), |_| rng.gen_range(-1.0..1.0));
        let _ = layer.forward(&x, true).unwrap();
        let _ = layer.backward(&Tensor4::from_elem((1, 4, 5, 5), 1.0)).unwrap();
        assert!(layer.att.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn records_expose_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(29);
        let spec = VamLayerSpec { c_in: 4, c_out: 6, s: 3, m: 2, n: 3, stride: 1, pad: 1 };
        let layer = random_layer(&mut rng, spec);
        let sources = vec!["s1b0".to_string(), "s1b1".to_string()];
        let recs = layer.records(2, &sources);
        assert_eq!(recs.len(), 3);
        for (j, r) in recs.iter().enumerate() {
            assert_eq!(r.block, j);
            assert_eq!(r.sources, sources);
            let sum: f64 = r.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }
}
