//! Seeded parameter initialization (He-normal fan-in for weights, small
//! Gaussian for attention logits).

use ndarray::{Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Std used when drawing attention logits: near-uniform softmax start while
/// breaking exact ties.
pub const ATTENTION_INIT_STD: f64 = 0.01;

/// He-normal convolution weight: std = sqrt(2 / (C_in * S * S)).
pub fn conv_weight(
    rng: &mut ChaCha20Rng,
    c_out: usize,
    c_in: usize,
    s: usize,
) -> Array4<f64> {
    let std = (2.0 / (c_in * s * s) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array4::from_shape_fn((c_out, c_in, s, s), |_| dist.sample(rng))
}

/// He-normal linear weight: std = sqrt(2 / in_features).
pub fn linear_weight(rng: &mut ChaCha20Rng, out_features: usize, in_features: usize) -> Array2<f64> {
    let std = (2.0 / in_features as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("valid normal");
    Array2::from_shape_fn((out_features, in_features), |_| dist.sample(rng))
}

/// Attention logits: N(0, ATTENTION_INIT_STD^2).
pub fn attention_logits(rng: &mut ChaCha20Rng, arity: usize) -> Vec<f64> {
    let dist = Normal::new(0.0, ATTENTION_INIT_STD).expect("valid normal");
    (0..arity).map(|_| dist.sample(rng)).collect()
}

/// A fresh RNG whose stream is decoupled from `seed`'s main stream; used so
/// attention draws do not shift the weight-initialization stream.
pub fn substream(seed: u64, salt: u64) -> ChaCha20Rng {
    use rand::SeedableRng;
    ChaCha20Rng::seed_from_u64(seed ^ salt.rotate_left(17).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Uniform label/shuffle helper kept here so all randomness flows through
/// seeded ChaCha streams.
pub fn shuffled_indices(rng: &mut ChaCha20Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher–Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}
