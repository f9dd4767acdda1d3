//! All training objectives and probability transforms: tempered softmax,
//! cross-entropy, KL divergence, vanilla distillation, label smoothing, the
//! per-class binary distillation objective, attention entropy, and the
//! entropy-regularized distillation objective — together with their analytic
//! gradients with respect to logits.
//!
//! Conventions: natural logarithms everywhere; probabilities are floored at
//! [`PROB_FLOOR`] before any logarithm; `alpha` weights the hard-label term
//! and `1 - alpha` the KL term.

use crate::attention::AttentionSnapshot;
use crate::error::{Error, Result};
use crate::types::{BinaryTaskWeights, KDHyperParams, LogitVector, ProbVector, PROB_FLOOR};

/// Numerically stable softmax of `z / tau` (max logit subtracted before
/// exponentiation).
pub fn tempered_softmax(z: &LogitVector, tau: f64) -> Result<ProbVector> {
    if !(tau > 0.0) {
        return Err(Error::invalid_argument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    ProbVector::new(softmax_slice(z.as_slice(), tau))
}

/// Softmax over a raw slice; callers guarantee tau > 0 and len >= 2.
pub(crate) fn softmax_slice(z: &[f64], tau: f64) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&v| ((v - m) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn floored_ln(p: f64) -> f64 {
    p.max(PROB_FLOOR).ln()
}

/// Cross-entropy −log p at the true index of a one-hot target.
pub fn ce_loss(p: &ProbVector, y: &ProbVector) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::shape(format!(
            "ce_loss: prediction length {} vs target length {}",
            p.len(),
            y.len()
        )));
    }
    if !y.is_one_hot() {
        return Err(Error::invalid_argument("ce_loss target must be one-hot"));
    }
    Ok(-floored_ln(p[y.argmax()]))
}

/// Cross-entropy against an arbitrary (not necessarily one-hot) target.
pub fn cross_entropy_general(p: &[f64], target: &[f64]) -> Result<f64> {
    if p.len() != target.len() {
        return Err(Error::shape(format!(
            "cross_entropy: prediction length {} vs target length {}",
            p.len(),
            target.len()
        )));
    }
    Ok(target
        .iter()
        .zip(p)
        .filter(|(&t, _)| t > 0.0)
        .map(|(&t, &pi)| -t * floored_ln(pi))
        .sum())
}

/// KL(q ‖ p) = Σ q_i (log q_i − log p_i), with 0·log(0/·) = 0.
pub fn kl_div(q: &ProbVector, p: &ProbVector) -> Result<f64> {
    if q.len() != p.len() {
        return Err(Error::shape(format!(
            "kl_div: lengths {} vs {}",
            q.len(),
            p.len()
        )));
    }
    Ok(kl_slices(q.as_slice(), p.as_slice()))
}

pub(crate) fn kl_slices(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (floored_ln(qi) - floored_ln(pi)))
        .sum()
}

/// Vanilla distillation objective:
/// `alpha * CE(softmax(z_s), y) + (1 - alpha) * KL(p(z_t; tau) ‖ p(z_s; tau))`.
///
/// The hard-label cross-entropy always uses temperature 1. No `tau^2`
/// rescaling is applied to the KL term; see
/// [`vanilla_kd_loss_with_rescale`] for the optional variant.
pub fn vanilla_kd_loss(
    z_s: &LogitVector,
    z_t: &LogitVector,
    y: &ProbVector,
    hp: &KDHyperParams,
) -> Result<f64> {
    vanilla_kd_loss_with_rescale(z_s, z_t, y, hp, false)
}

/// As [`vanilla_kd_loss`], optionally multiplying the KL term by `tau^2`
/// (the classical gradient-magnitude correction; off by default).
pub fn vanilla_kd_loss_with_rescale(
    z_s: &LogitVector,
    z_t: &LogitVector,
    y: &ProbVector,
    hp: &KDHyperParams,
    tau_sq_rescale: bool,
) -> Result<f64> {
    hp.validate()?;
    if z_s.len() != z_t.len() || z_s.len() != y.len() {
        return Err(Error::shape(format!(
            "vanilla_kd_loss: lengths z_s={} z_t={} y={}",
            z_s.len(),
            z_t.len(),
            y.len()
        )));
    }
    let ce = ce_loss(&tempered_softmax(z_s, 1.0)?, y)?;
    let kl = kl_div(
        &tempered_softmax(z_t, hp.tau)?,
        &tempered_softmax(z_s, hp.tau)?,
    )?;
    let kl_weight = if tau_sq_rescale { hp.tau * hp.tau } else { 1.0 };
    Ok(hp.alpha * ce + (1.0 - hp.alpha) * kl_weight * kl)
}

/// Smoothed target `(1 - eps) * y + eps / C`.
pub fn smoothed_target(y: &ProbVector, eps: f64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&eps) {
        return Err(Error::invalid_argument(format!(
            "smoothing eps = {eps} outside [0, 1)"
        )));
    }
    if !y.is_one_hot() {
        return Err(Error::invalid_argument(
            "label smoothing target must start from a one-hot vector",
        ));
    }
    let c = y.len() as f64;
    Ok(y.as_slice().iter().map(|&t| (1.0 - eps) * t + eps / c).collect())
}

/// Cross-entropy of `softmax(z_s)` against the smoothed target.
pub fn label_smoothing_loss(z_s: &LogitVector, y: &ProbVector, eps: f64) -> Result<f64> {
    if z_s.len() != y.len() {
        return Err(Error::shape(format!(
            "label_smoothing_loss: lengths z_s={} y={}",
            z_s.len(),
            y.len()
        )));
    }
    let target = smoothed_target(y, eps)?;
    cross_entropy_general(&softmax_slice(z_s.as_slice(), 1.0), &target)
}

/// Converts a K-class teacher distribution into K binary (negative, positive)
/// distributions: the k-th output is `[1 - p[k], p[k]]`.
pub fn to_binary_targets(p_t: &ProbVector) -> Vec<ProbVector> {
    p_t.as_slice()
        .iter()
        .map(|&p| {
            // Clamp tiny negative round-off so the pair stays a simplex.
            let p = p.clamp(0.0, 1.0);
            ProbVector::new(vec![1.0 - p, p]).expect("complement pair is a valid simplex")
        })
        .collect()
}

/// Weighted binary cross-entropy `−w0·y0·log p0 − w1·y1·log p1`.
pub fn weighted_bce(p_k: &ProbVector, y_k: &ProbVector, w: &BinaryTaskWeights) -> Result<f64> {
    if p_k.len() != 2 || y_k.len() != 2 {
        return Err(Error::shape(format!(
            "weighted_bce expects binary vectors, got lengths {} and {}",
            p_k.len(),
            y_k.len()
        )));
    }
    if !y_k.is_one_hot() {
        return Err(Error::invalid_argument("weighted_bce target must be one-hot"));
    }
    Ok(-w.w0 * y_k[0] * floored_ln(p_k[0]) - w.w1 * y_k[1] * floored_ln(p_k[1]))
}

/// The K-binary-head distillation objective:
/// `Σ_k alpha·WCE(softmax(h_k), y_k, w) + (1 - alpha)·KL(q̂_k ‖ p̂_k)`
/// with `q̂_k = [1 - p_t[k], p_t[k]]` and `p̂_k = softmax(h_k / tau)`.
///
/// `teacher_probs` must already be the tempered teacher distribution over the
/// K classes; `label` is the ground-truth class index.
pub fn explainer_kd_objective(
    head_logits: &[LogitVector],
    teacher_probs: &ProbVector,
    label: usize,
    hp: &KDHyperParams,
    w: &BinaryTaskWeights,
) -> Result<f64> {
    hp.validate()?;
    let k = head_logits.len();
    if k < 2 {
        return Err(Error::invalid_argument(format!(
            "explainer objective needs K >= 2 heads, got {k}"
        )));
    }
    if teacher_probs.len() != k {
        return Err(Error::shape(format!(
            "explainer objective: {k} heads vs teacher distribution of length {}",
            teacher_probs.len()
        )));
    }
    if label >= k {
        return Err(Error::invalid_argument(format!(
            "label {label} out of range for K = {k}"
        )));
    }
    let q_hats = to_binary_targets(teacher_probs);
    let mut total = 0.0;
    for (kk, h) in head_logits.iter().enumerate() {
        if h.len() != 2 {
            return Err(Error::shape(format!(
                "head {kk} has {} logits, expected 2",
                h.len()
            )));
        }
        let y_k = ProbVector::one_hot(2, usize::from(kk == label))?;
        let p_k = tempered_softmax(h, 1.0)?;
        let wce = weighted_bce(&p_k, &y_k, w)?;
        let p_hat = tempered_softmax(h, hp.tau)?;
        let kl = kl_div(&q_hats[kk], &p_hat)?;
        total += hp.alpha * wce + (1.0 - hp.alpha) * kl;
    }
    Ok(total)
}

/// Sum over all gates of the Shannon entropy (nats) of the attention weights.
pub fn attention_entropy(snapshot: &AttentionSnapshot) -> Result<f64> {
    snapshot.validate()?;
    Ok(snapshot
        .records
        .iter()
        .map(|r| entropy_slice(&r.weights))
        .sum())
}

pub(crate) fn entropy_slice(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * floored_ln(p))
        .sum::<f64>()
}

/// Entropy-regularized distillation objective:
/// `(1 - alpha)·KL + alpha·CE + gamma·attention_entropy(snapshot)`,
/// with the KL and CE terms exactly as in [`vanilla_kd_loss`].
pub fn vam_objective(
    z_s: &LogitVector,
    z_t: &LogitVector,
    y: &ProbVector,
    hp: &KDHyperParams,
    snapshot: &AttentionSnapshot,
) -> Result<f64> {
    let kd = vanilla_kd_loss(z_s, z_t, y, hp)?;
    Ok(kd + hp.gamma * attention_entropy(snapshot)?)
}

// ---------------------------------------------------------------------------
// Analytic gradients w.r.t. logits (used by training and the gradient suite).
// ---------------------------------------------------------------------------

/// Gradient of `ce_loss(tempered_softmax(z, tau), y)` w.r.t. `z`:
/// `(softmax(z/tau) - y) / tau`.
pub fn ce_tempered_grad(z: &LogitVector, tau: f64, y: &ProbVector) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::invalid_argument(format!(
            "temperature must be > 0, got {tau}"
        )));
    }
    if z.len() != y.len() {
        return Err(Error::shape(format!(
            "ce_tempered_grad: lengths z={} y={}",
            z.len(),
            y.len()
        )));
    }
    let p = softmax_slice(z.as_slice(), tau);
    Ok(p.iter()
        .zip(y.as_slice())
        .map(|(&pi, &yi)| (pi - yi) / tau)
        .collect())
}

/// Gradient of `kl_div(q, tempered_softmax(z, tau))` w.r.t. `z`:
/// `(softmax(z/tau) - q) / tau`.
pub fn kl_tempered_grad(q: &ProbVector, z: &LogitVector, tau: f64) -> Result<Vec<f64>> {
    if z.len() != q.len() {
        return Err(Error::shape(format!(
            "kl_tempered_grad: lengths q={} z={}",
            q.len(),
            z.len()
        )));
    }
    let p = softmax_slice(z.as_slice(), tau);
    Ok(p.iter()
        .zip(q.as_slice())
        .map(|(&pi, &qi)| (pi - qi) / tau)
        .collect())
}

/// Gradient of [`vanilla_kd_loss`] w.r.t. the student logits.
pub fn vanilla_kd_grad(
    z_s: &LogitVector,
    z_t: &LogitVector,
    y: &ProbVector,
    hp: &KDHyperParams,
    tau_sq_rescale: bool,
) -> Result<Vec<f64>> {
    hp.validate()?;
    if z_s.len() != z_t.len() || z_s.len() != y.len() {
        return Err(Error::shape(format!(
            "vanilla_kd_grad: lengths z_s={} z_t={} y={}",
            z_s.len(),
            z_t.len(),
            y.len()
        )));
    }
    let ce_grad = ce_tempered_grad(z_s, 1.0, y)?;
    let q_t = tempered_softmax(z_t, hp.tau)?;
    let kl_grad = kl_tempered_grad(&q_t, z_s, hp.tau)?;
    let kl_weight = if tau_sq_rescale { hp.tau * hp.tau } else { 1.0 };
    Ok(ce_grad
        .iter()
        .zip(&kl_grad)
        .map(|(&c, &k)| hp.alpha * c + (1.0 - hp.alpha) * kl_weight * k)
        .collect())
}

/// Gradient of [`label_smoothing_loss`] w.r.t. the logits:
/// `softmax(z) - smoothed_target`.
pub fn label_smoothing_grad(z_s: &LogitVector, y: &ProbVector, eps: f64) -> Result<Vec<f64>> {
    if z_s.len() != y.len() {
        return Err(Error::shape(format!(
            "label_smoothing_grad: lengths z_s={} y={}",
            z_s.len(),
            y.len()
        )));
    }
    let target = smoothed_target(y, eps)?;
    let p = softmax_slice(z_s.as_slice(), 1.0);
    Ok(p.iter().zip(&target).map(|(&pi, &ti)| pi - ti).collect())
}

/// Gradient of [`explainer_kd_objective`] w.r.t. each head's two logits.
pub fn explainer_kd_grad(
    head_logits: &[LogitVector],
    teacher_probs: &ProbVector,
    label: usize,
    hp: &KDHyperParams,
    w: &BinaryTaskWeights,
) -> Result<Vec<[f64; 2]>> {
    hp.validate()?;
    let k = head_logits.len();
    if teacher_probs.len() != k {
        return Err(Error::shape(format!(
            "explainer_kd_grad: {k} heads vs teacher distribution of length {}",
            teacher_probs.len()
        )));
    }
    if label >= k {
        return Err(Error::invalid_argument(format!(
            "label {label} out of range for K = {k}"
        )));
    }
    let q_hats = to_binary_targets(teacher_probs);
    let mut grads = Vec::with_capacity(k);
    for (kk, h) in head_logits.iter().enumerate() {
        if h.len() != 2 {
            return Err(Error::shape(format!(
                "head {kk} has {} logits, expected 2",
                h.len()
            )));
        }
        let positive = kk == label;
        let (true_idx, weight) = if positive { (1, w.w1) } else { (0, w.w0) };
        let p = softmax_slice(h.as_slice(), 1.0);
        let p_hat = softmax_slice(h.as_slice(), hp.tau);
        let q = q_hats[kk].as_slice();
        let mut g = [0.0; 2];
        for j in 0..2 {
            let y_j = if j == true_idx { 1.0 } else { 0.0 };
            let wce = weight * (p[j] - y_j);
            let kl = (p_hat[j] - q[j]) / hp.tau;
            g[j] = hp.alpha * wce + (1.0 - hp.alpha) * kl;
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Gradient of the Shannon entropy of `softmax(v / t)` w.r.t. `v`:
/// `dH/dv_i = -(a_i / t) (ln a_i + H)`.
pub fn entropy_grad_from_logits(v: &[f64], t: f64) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::invalid_argument(format!(
            "temperature must be > 0, got {t}"
        )));
    }
    let a = softmax_slice(v, t);
    let h = entropy_slice(&a);
    Ok(a.iter().map(|&ai| -(ai / t) * (floored_ln(ai) + h)).collect())
}
