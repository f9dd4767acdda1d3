//! Task-oriented attention: trainable logits -> simplex weights -> feature
//! mixing, plus argmax hardening and the serializable snapshot contract.
//!
//! Attention weights here are dataset-level trainable parameters (one softmax
//! per gate), not functions of the individual input.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, ProbVector};

/// A single gate: trainable logits `v` of arity M and a temperature `t`.
///
/// When `hardened` is set the gate reports the one-hot argmax of its logits
/// instead of the softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionModule {
    pub v: Vec<f64>,
    pub t: f64,
    #[serde(default)]
    pub hardened: bool,
}

impl AttentionModule {
    pub fn new(v: Vec<f64>, t: f64) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::invalid_argument("attention arity must be >= 1"));
        }
        if !(t > 0.0) {
            return Err(Error::invalid_argument(format!(
                "attention temperature must be > 0, got {t}"
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::invariant("attention logits must be finite"));
        }
        Ok(Self { v, t, hardened: false })
    }

    pub fn arity(&self) -> usize {
        self.v.len()
    }

    /// Current weight vector: softmax(v / t), or the hardened one-hot.
    pub fn weights(&self) -> Vec<f64> {
        if self.hardened {
            let mut w = vec![0.0; self.v.len()];
            w[argmax(&self.v)] = 1.0;
            w
        } else {
            softmax_scaled(&self.v, self.t)
        }
    }
}

/// Softmax of `v / t` with max-subtraction for stability. Callers guarantee t > 0.
fn softmax_scaled(v: &[f64], t: f64) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|&x| ((x - m) / t).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Softmax weights of a gate as a validated [`ProbVector`] (arity 1 gates
/// yield the singleton handled separately since `ProbVector` needs length 2).
pub fn attention_weights(m: &AttentionModule) -> Result<Vec<f64>> {
    if !(m.t > 0.0) {
        return Err(Error::invalid_argument(format!(
            "attention temperature must be > 0, got {}",
            m.t
        )));
    }
    Ok(m.weights())
}

/// Gradient of the weight vector w.r.t. the logits, applied to an upstream
/// gradient `d_weights`: returns J^T d_weights where J is the softmax Jacobian
/// divided by the temperature.
pub fn attention_weights_backward(m: &AttentionModule, d_weights: &[f64]) -> Vec<f64> {
    let a = softmax_scaled(&m.v, m.t);
    let dot: f64 = a.iter().zip(d_weights).map(|(ai, di)| ai * di).sum();
    a.iter()
        .zip(d_weights)
        .map(|(&ai, &di)| ai * (di - dot) / m.t)
        .collect()
}

/// A dense (C, H, W) activation tensor.
pub type FeatureMap = Array3<f64>;

/// Convex mixing of feature maps: sum_k weights[k] * features[k].
pub fn mix_features(weights: &[f64], features: &[FeatureMap]) -> Result<FeatureMap> {
    if weights.len() != features.len() {
        return Err(Error::shape(format!(
            "mix_features: {} weights vs {} feature maps",
            weights.len(),
            features.len()
        )));
    }
    if features.is_empty() {
        return Err(Error::invalid_argument("mix_features: empty input"));
    }
    let shape = features[0].raw_dim();
    for (k, f) in features.iter().enumerate() {
        if f.raw_dim() != shape {
            return Err(Error::shape(format!(
                "mix_features: feature {k} has shape {:?}, expected {:?}",
                f.shape(),
                shape
            )));
        }
    }
    let mut out = FeatureMap::zeros(shape);
    for (w, f) in weights.iter().zip(features) {
        out.scaled_add(*w, f);
    }
    Ok(out)
}

/// One-hot at the argmax; ties broken by lowest index.
pub fn harden(weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; weights.len()];
    out[argmax(weights)] = 1.0;
    out
}

/// One record per attention gate, identified by (stage, block) and carrying
/// the labels of the inputs it mixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub stage: usize,
    pub block: usize,
    pub sources: Vec<String>,
    pub logits: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AttentionRecord {
    /// Label of the node this gate feeds: `s{stage}b{block}`.
    pub fn label(&self) -> String {
        format!("s{}b{}", self.stage, self.block)
    }
}

/// The portable attention state of a whole model: one record per gate.
///
/// Serialized as a JSON list of `{stage, block, sources, logits, weights}`
/// objects; this is the contract consumed by tree analysis.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AttentionSnapshot {
    pub records: Vec<AttentionRecord>,
}

impl AttentionSnapshot {
    pub fn new(records: Vec<AttentionRecord>) -> Self {
        Self { records }
    }

    /// Checks simplex validity of every weight vector and source/weight arity
    /// agreement.
    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            if r.weights.is_empty() {
                return Err(Error::invariant(format!(
                    "snapshot record {} has no weights",
                    r.label()
                )));
            }
            if r.sources.len() != r.weights.len() {
                return Err(Error::invariant(format!(
                    "snapshot record {}: {} sources vs {} weights",
                    r.label(),
                    r.sources.len(),
                    r.weights.len()
                )));
            }
            if r.logits.len() != r.weights.len() {
                return Err(Error::invariant(format!(
                    "snapshot record {}: {} logits vs {} weights",
                    r.label(),
                    r.logits.len(),
                    r.weights.len()
                )));
            }
            let sum: f64 = r.weights.iter().sum();
            if r.weights.iter().any(|&w| !w.is_finite() || w < 0.0)
                || (sum - 1.0).abs() > crate::types::PROB_SUM_TOL
            {
                return Err(Error::invariant(format!(
                    "snapshot record {} weights are not a probability vector (sum {sum})",
                    r.label()
                )));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let snap: AttentionSnapshot = serde_json::from_str(text)?;
        snap.validate()?;
        Ok(snap)
    }
}

/// Convenience: validated simplex from a gate for entropy computations.
pub fn weights_as_prob(r: &AttentionRecord) -> Result<ProbVector> {
    if r.weights.len() == 1 {
        // Singleton gates are valid but outside ProbVector's length >= 2
        // domain; report them via the two-entry embedding [1, 0].
        return ProbVector::new(vec![r.weights[0], 1.0 - r.weights[0]]);
    }
    ProbVector::new(r.weights.clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, rel_err};
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let m = AttentionModule::new(vec![0.0, 0.0, 0.0], 2.5).unwrap();
        let w = attention_weights(&m).unwrap();
        for &x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn singleton_gate_is_trivial() {
        let m = AttentionModule::new(vec![1.7], 1.0).unwrap();
        assert_eq!(attention_weights(&m).unwrap(), vec![1.0]);
    }

    #[test]
    fn closed_form_weights() {
        // v = [ln 4, 0], T = 1 -> [0.8, 0.2]
        let m = AttentionModule::new(vec![4.0f64.ln(), 0.0], 1.0).unwrap();
        let w = attention_weights(&m).unwrap();
        assert!((w[0] - 0.8).abs() < 1e-12);
        assert!((w[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn non_positive_temperature_rejected() {
        assert!(AttentionModule::new(vec![0.0], 0.0).is_err());
        assert!(AttentionModule::new(vec![0.0], -1.0).is_err());
    }

    #[test]
    fn shift_invariance() {
        let base = vec![0.3, -1.2, 0.7, 0.0];
        let m1 = AttentionModule::new(base.clone(), 0.7).unwrap();
        let shifted: Vec<f64> = base.iter().map(|v| v + 5.5).collect();
        let m2 = AttentionModule::new(shifted, 0.7).unwrap();
        let w1 = attention_weights(&m1).unwrap();
        let w2 = attention_weights(&m2).unwrap();
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn harden_matches_logit_argmax_for_any_temperature() {
        let v = vec![0.3, 0.9, -0.2];
        for t in [0.1, 1.0, 10.0] {
            let m = AttentionModule::new(v.clone(), t).unwrap();
            let h = harden(&attention_weights(&m).unwrap());
            assert_eq!(h, vec![0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn harden_tie_break() {
        assert_eq!(harden(&[0.5, 0.5]), vec![1.0, 0.0]);
        assert_eq!(harden(&[0.2, 0.5, 0.3]), vec![0.0, 1.0, 0.0]);
        assert_eq!(harden(&[1.0]), vec![1.0]);
    }

    #[test]
    fn hardened_module_reports_one_hot() {
        let mut m = AttentionModule::new(vec![0.1, 0.4, 0.2], 1.0).unwrap();
        m.hardened = true;
        assert_eq!(m.weights(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn mix_selects_with_one_hot() {
        let f0 = Array3::from_elem((2, 3, 3), 1.0);
        let f1 = Array3::from_elem((2, 3, 3), 2.0);
        let f2 = Array3::from_elem((2, 3, 3), 3.0);
        let out = mix_features(&[0.0, 0.0, 1.0], &[f0, f1, f2.clone()]).unwrap();
        assert_eq!(out, f2);
    }

    #[test]
    fn mix_arithmetic() {
        let f1 = Array3::from_elem((1, 2, 2), 1.0);
        let f2 = Array3::from_elem((1, 2, 2), 3.0);
        let out = mix_features(&[0.5, 0.5], &[f1, f2]).unwrap();
        assert!(out.iter().all(|&v| (v - 2.0).abs() < 1e-12));
    }

    #[test]
    fn mix_convexity_on_identical_inputs() {
        let f = Array3::from_shape_fn((2, 2, 2), |(c, h, w)| (c + 2 * h + w) as f64);
        let out = mix_features(&[0.3, 0.45, 0.25], &[f.clone(), f.clone(), f.clone()]).unwrap();
        for (a, b) in out.iter().zip(f.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_permutation_equivariance() {
        let f0 = Array3::from_shape_fn((1, 2, 2), |(_, h, w)| (h + w) as f64);
        let f1 = Array3::from_shape_fn((1, 2, 2), |(_, h, w)| (2 * h + 3 * w) as f64);
        let a = mix_features(&[0.7, 0.3], &[f0.clone(), f1.clone()]).unwrap();
        let b = mix_features(&[0.3, 0.7], &[f1, f0]).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mix_shape_mismatch_is_error() {
        let f0 = Array3::zeros((1, 2, 2));
        let f1 = Array3::zeros((1, 3, 2));
        assert!(matches!(
            mix_features(&[0.5, 0.5], &[f0, f1]),
            Err(crate::error::Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn mix_through_attention_gradient_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let t = 1.3;
        let v: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let feats: Vec<FeatureMap> = (0..4)
            .map(|_| Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0)))
            .collect();
        let probe = Array3::from_shape_fn((2, 3, 3), |_| rng.gen_range(-1.0..1.0));

        // Scalar objective: <probe, mix(softmax(v/t), feats)>.
        let eval = |v: &[f64]| {
            let m = AttentionModule::new(v.to_vec(), t).unwrap();
            let out = mix_features(&m.weights(), &feats).unwrap();
            (&out * &probe).sum()
        };

        // Analytic gradient: d a_k = <probe, F_k>, pulled back through softmax.
        let m = AttentionModule::new(v.clone(), t).unwrap();
        let d_weights: Vec<f64> = feats.iter().map(|f| (f * &probe).sum()).collect();
        let grad = attention_weights_backward(&m, &d_weights);

        for i in 0..v.len() {
            let num = central_diff(&v, i, 1e-4, eval);
            assert!(
                rel_err(grad[i], num) <= 1e-3,
                "attention grad[{i}]: analytic {} vs numeric {num}",
                grad[i]
            );
        }
    }

    #[test]
    fn snapshot_json_round_trip() {
        let snap = AttentionSnapshot::new(vec![
            AttentionRecord {
                stage: 2,
                block: 0,
                sources: vec!["s1b0".into()],
                logits: vec![0.0],
                weights: vec![1.0],
            },
            AttentionRecord {
                stage: 3,
                block: 1,
                sources: vec!["s2b0".into(), "s2b1".into()],
                logits: vec![0.2, -0.1],
                weights: vec![0.574442516811659, 0.425557483188341],
            },
        ]);
        snap.validate().unwrap();
        let text = snap.to_json().unwrap();
        let back = AttentionSnapshot::from_json(&text).unwrap();
        assert_eq!(snap, back);
    }

    #[test]
    fn snapshot_rejects_bad_simplex() {
        let snap = AttentionSnapshot::new(vec![AttentionRecord {
            stage: 2,
            block: 0,
            sources: vec!["s1b0".into(), "s1b1".into()],
            logits: vec![0.0, 0.0],
            weights: vec![0.9, 0.3],
        }]);
        assert!(snap.validate().is_err());
    }
}
