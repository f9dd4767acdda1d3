//! Shared domain types: probability/logit vectors and loss hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that probabilities sum to one.
pub const PROB_SUM_TOL: f64 = 1e-6;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// A non-negative real vector summing to one (categorical or binary distribution).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates the simplex invariants: length ≥ 2, entries ≥ 0, sum within
    /// [`PROB_SUM_TOL`] of one.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invariant(format!(
                "probability vector needs length >= 2, got {}",
                values.len()
            )));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invariant(format!(
                    "probability entry {i} is {v}, must be finite and >= 0"
                )));
            }
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::invariant(format!(
                "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOL}"
            )));
        }
        Ok(Self(values))
    }

    /// Builds a one-hot vector of length `len` with the 1 at `index`.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if len < 2 || index >= len {
            return Err(Error::invalid_argument(format!(
                "one_hot(len={len}, index={index}) out of range"
            )));
        }
        let mut v = vec![0.0; len];
        v[index] = 1.0;
        Ok(Self(v))
    }

    /// Builds the uniform distribution over `len` entries.
    pub fn uniform(len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::invalid_argument(format!(
                "uniform(len={len}) needs len >= 2"
            )));
        }
        Ok(Self(vec![1.0 / len as f64; len]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest entry; ties broken by lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    /// Returns true when the vector is exactly one-hot.
    pub fn is_one_hot(&self) -> bool {
        self.0.iter().filter(|&&v| v == 1.0).count() == 1
            && self.0.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    /// Shannon entropy in nats, with the probability floor applied inside the log.
    pub fn entropy(&self) -> f64 {
        -self
            .0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| p * p.max(PROB_FLOOR).ln())
            .sum::<f64>()
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// An unconstrained finite real vector of pre-softmax scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invariant("logit vector must be non-empty".to_string()));
        }
        for (i, &v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::invariant(format!("logit entry {i} is {v}, must be finite")));
            }
        }
        Ok(Self(values))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl std::ops::Index<usize> for LogitVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl AsRef<[f64]> for LogitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// Hyper-parameters of the distillation objectives.
///
/// `alpha` weights the hard-label cross-entropy term, `1 - alpha` the KL term;
/// `tau` is the softmax temperature of the KL term; `gamma` weights the
/// attention-entropy regularizer; `smoothing_eps` is the label-smoothing
/// strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KDHyperParams {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
    pub smoothing_eps: f64,
}

impl Default for KDHyperParams {
    fn default() -> Self {
        Self {
            alpha: 0.9,
            tau: 4.0,
            gamma: 0.1,
            smoothing_eps: 0.1,
        }
    }
}

impl KDHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid_argument(format!(
                "alpha = {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.tau > 0.0) {
            return Err(Error::invalid_argument(format!("tau = {} must be > 0", self.tau)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::invalid_argument(format!(
                "gamma = {} must be >= 0",
                self.gamma
            )));
        }
        if !(0.0..1.0).contains(&self.smoothing_eps) {
            return Err(Error::invalid_argument(format!(
                "smoothing_eps = {} outside [0, 1)",
                self.smoothing_eps
            )));
        }
        Ok(())
    }
}

/// Per-class weights of the weighted binary cross-entropy (negative/positive).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinaryTaskWeights {
    pub w0: f64,
    pub w1: f64,
}

impl BinaryTaskWeights {
    pub fn new(w0: f64, w1: f64) -> Result<Self> {
        if !(w0 > 0.0) || !(w1 > 0.0) {
            return Err(Error::invalid_argument(format!(
                "binary task weights must be strictly positive, got w0={w0}, w1={w1}"
            )));
        }
        Ok(Self { w0, w1 })
    }

    /// Inverse-class-frequency default for a balanced `k`-class dataset turned
    /// into k one-vs-rest tasks: w1 = k - 1, w0 = 1.
    pub fn balanced_for(k: usize) -> Self {
        Self {
            w0: 1.0,
            w1: (k.max(2) - 1) as f64,
        }
    }
}

/// Index of the largest entry of a slice; ties broken by lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
