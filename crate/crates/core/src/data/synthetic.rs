//! Seeded synthetic image-classification task.
//!
//! Each class owns a Gaussian blob with a class-specific position (on a ring)
//! and color; every image also carries a fainter blob of the *next* class, so
//! classes overlap and a teacher's soft targets carry real inter-class
//! structure. Pixels land in [0, 1] before normalization.

use ndarray::Array4;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{DatasetSpec, Split};
use crate::nn::init::substream;

/// Blob center and color for one class on a K-ring.
fn class_geometry(k_idx: usize, k: usize, image: usize) -> ((f64, f64), [f64; 3]) {
    let theta = 2.0 * std::f64::consts::PI * k_idx as f64 / k as f64;
    let mid = image as f64 / 2.0;
    let radius = image as f64 / 4.0;
    let center = (mid + radius * theta.sin(), mid + radius * theta.cos());
    let color = [
        0.6 + 0.4 * theta.sin(),
        0.6 + 0.4 * theta.cos(),
        0.6 - 0.4 * theta.sin(),
    ];
    (center, color.map(|c| c.clamp(0.05, 1.0)))
}

/// Generates one split. Labels cycle 0..K so every class count is exact;
/// train and test come from disjoint RNG substreams of `spec.seed`.
pub fn generate(spec: &DatasetSpec, split: Split) -> (Array4<f64>, Vec<usize>) {
    let (n, salt) = match split {
        Split::Train => (spec.train_subset, 0x7E57_0001),
        Split::Test => (spec.test_subset, 0x7E57_0002),
    };
    let k = spec.k;
    let hw = spec.image;
    let mut rng = substream(spec.seed, salt);
    let noise = Normal::new(0.0, 0.04).expect("valid sigma");
    let jitter = hw as f64 / 12.0;
    let sigma = hw as f64 / 6.0;
    let sigma2 = hw as f64 / 7.0;

    let mut images = Array4::<f64>::zeros((n, 3, hw, hw));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % k;
        labels.push(label);
        let ((cy, cx), color) = class_geometry(label, k, hw);
        let ((dy, dx), color2) = class_geometry((label + 1) % k, k, hw);
        let cy = cy + rng.gen_range(-jitter..=jitter);
        let cx = cx + rng.gen_range(-jitter..=jitter);
        let dy = dy + rng.gen_range(-jitter..=jitter);
        let dx = dx + rng.gen_range(-jitter..=jitter);
        for y in 0..hw {
            for x in 0..hw {
                let g1 = (-((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2))
                    / (2.0 * sigma * sigma))
                    .exp();
                let g2 = (-((y as f64 - dy).powi(2) + (x as f64 - dx).powi(2))
                    / (2.0 * sigma2 * sigma2))
                    .exp();
                for c in 0..3 {
                    let v = color[c] * g1 + 0.45 * color2[c] * g2 + noise.sample(&mut rng);
                    images[(i, c, y, x)] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    (images, labels)
}
