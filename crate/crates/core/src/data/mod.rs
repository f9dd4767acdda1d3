//! Dataset specification, loading, normalization, and augmentation.

pub mod cifar;
pub mod synthetic;

use std::path::PathBuf;

use ndarray::Array4;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::Tensor4;

pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const SYNTHETIC_MEAN: [f64; 3] = [0.5, 0.5, 0.5];
pub const SYNTHETIC_STD: [f64; 3] = [0.25, 0.25, 0.25];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataSource {
    Cifar10Binary,
    Cifar100Binary,
    Synthetic,
}

impl DataSource {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataSource::Cifar10Binary => "cifar10-binary",
            DataSource::Cifar100Binary => "cifar100-binary",
            DataSource::Synthetic => "synthetic",
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "cifar10-binary" => Ok(DataSource::Cifar10Binary),
            "cifar100-binary" => Ok(DataSource::Cifar100Binary),
            "synthetic" => Ok(DataSource::Synthetic),
            other => Err(Error::config(format!(
                "unknown data source '{other}' (expected cifar10-binary, cifar100-binary, synthetic)"
            ))),
        }
    }

    /// Class count fixed by the source, if any.
    pub fn fixed_k(&self) -> Option<usize> {
        match self {
            DataSource::Cifar10Binary => Some(10),
            DataSource::Cifar100Binary => Some(100),
            DataSource::Synthetic => None,
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// Directory holding the binary batches (unused for synthetic).
    pub root: PathBuf,
    /// 0 takes the full split.
    pub train_subset: usize,
    pub test_subset: usize,
    pub k: usize,
    /// Image height/width (CIFAR is fixed at 32).
    pub image: usize,
    /// Generation seed for the synthetic source.
    pub seed: u64,
    pub normalize_mean: [f64; 3],
    pub normalize_std: [f64; 3],
    /// Random crop + horizontal flip during training.
    pub augment: bool,
}

impl DatasetSpec {
    pub fn synthetic(k: usize, image: usize, train: usize, test: usize, seed: u64) -> Self {
        Self {
            source: DataSource::Synthetic,
            root: PathBuf::new(),
            train_subset: train,
            test_subset: test,
            k,
            image,
            seed,
            normalize_mean: SYNTHETIC_MEAN,
            normalize_std: SYNTHETIC_STD,
            augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(k) = self.source.fixed_k() {
            if self.k != k {
                return Err(Error::config(format!(
                    "{} has {k} classes, config says {}",
                    self.source, self.k
                )));
            }
            if self.image != 32 {
                return Err(Error::config(format!(
                    "{} images are 32x32, config says {}",
                    self.source, self.image
                )));
            }
        }
        if self.k < 2 {
            return Err(Error::config(format!("class count {} must be >= 2", self.k)));
        }
        if self.image < 4 {
            return Err(Error::config(format!("image size {} must be >= 4", self.image)));
        }
        if self.normalize_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("normalization std must be positive"));
        }
        match self.source {
            DataSource::Cifar10Binary | DataSource::Cifar100Binary => {
                let full = (50_000, 10_000);
                if self.train_subset > full.0 || self.test_subset > full.1 {
                    return Err(Error::config(format!(
                        "subset sizes ({}, {}) exceed the full split sizes {full:?}",
                        self.train_subset, self.test_subset
                    )));
                }
            }
            DataSource::Synthetic => {
                if self.train_subset == 0 || self.test_subset == 0 {
                    return Err(Error::config(
                        "synthetic source needs explicit train/test sizes",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// An in-memory split: normalized images plus labels.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// (n, 3, image, image), already normalized.
    pub images: Array4<f64>,
    pub labels: Vec<usize>,
    pub k: usize,
    /// Content hash binding caches to this exact split.
    pub fingerprint: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices` as a batch tensor plus labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let (_, c, h, w) = self.images.dim();
        let mut x = Tensor4::zeros((indices.len(), c, h, w));
        let mut y = Vec::with_capacity(indices.len());
        for (bi, &i) in indices.iter().enumerate() {
            x.index_axis_mut(ndarray::Axis(0), bi)
                .assign(&self.images.index_axis(ndarray::Axis(0), i));
            y.push(self.labels[i]);
        }
        (x, y)
    }
}

fn fingerprint(spec: &DatasetSpec, split: Split, images: &Array4<f64>, labels: &[usize]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(spec.source.as_str().as_bytes());
    hasher.update(match split {
        Split::Train => b"train",
        Split::Test => b"test!",
    });
    for v in [spec.k, spec.image, labels.len()] {
        hasher.update((v as u64).to_le_bytes());
    }
    for &l in labels {
        hasher.update((l as u32).to_le_bytes());
    }
    for v in images.iter() {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

/// Loads one split, normalized to `(x/255 - mean) / std` for binary sources
/// and `(x - mean) / std` for the synthetic generator.
pub fn load_dataset(spec: &DatasetSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let want = match split {
        Split::Train => spec.train_subset,
        Split::Test => spec.test_subset,
    };
    let (mut images, labels) = match spec.source {
        DataSource::Cifar10Binary => cifar::load_cifar10(&spec.root, split, want)?,
        DataSource::Cifar100Binary => cifar::load_cifar100(&spec.root, split, want)?,
        DataSource::Synthetic => synthetic::generate(spec, split),
    };
    for ci in 0..3 {
        let mean = spec.normalize_mean[ci];
        let std = spec.normalize_std[ci];
        images
            .index_axis_mut(ndarray::Axis(1), ci)
            .mapv_inplace(|v| (v - mean) / std);
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= spec.k) {
        return Err(Error::Ingestion {
            offset: 0,
            message: format!("label {bad} out of range for K = {}", spec.k),
        });
    }
    let fp = fingerprint(spec, split, &images, &labels);
    Ok(Dataset { images, labels, k: spec.k, fingerprint: fp })
}

/// Random crop (zero padding) + horizontal flip, applied in place to a
/// training batch. Pad is 2 pixels below 24 px, else 4 (CIFAR convention).
pub fn augment_batch(x: &mut Tensor4, rng: &mut ChaCha20Rng) {
    let (b, c, h, w) = x.dim();
    let pad = if h < 24 { 2 } else { 4 };
    for bi in 0..b {
        let flip = rng.gen_bool(0.5);
        let dy = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.gen_range(0..=2 * pad) as isize - pad as isize;
        let orig: Vec<f64> = x.index_axis(ndarray::Axis(0), bi).iter().copied().collect();
        let at = |ci: usize, yi: usize, xi: usize| orig[(ci * h + yi) * w + xi];
        for ci in 0..c {
            for yi in 0..h {
                for xi in 0..w {
                    let sy = yi as isize + dy;
                    let sx = xi as isize + dx;
                    let v = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                        0.0
                    } else {
                        let sx = if flip { w - 1 - sx as usize } else { sx as usize };
                        at(ci, sy as usize, sx)
                    };
                    x[(bi, ci, yi, xi)] = v;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_spec() -> DatasetSpec {
        DatasetSpec::synthetic(4, 12, 64, 32, 7)
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = toy_spec();
        let a = load_dataset(&spec, Split::Train).unwrap();
        let b = load_dataset(&spec, Split::Train).unwrap();
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.fingerprint, b.fingerprint);
    }

    #[test]
    fn splits_and_seeds_change_the_fingerprint() {
        let spec = toy_spec();
        let train = load_dataset(&spec, Split::Train).unwrap();
        let test = load_dataset(&spec, Split::Test).unwrap();
        assert_ne!(train.fingerprint, test.fingerprint);

        let mut spec2 = toy_spec();
        spec2.seed = 8;
        let other = load_dataset(&spec2, Split::Train).unwrap();
        assert_ne!(train.fingerprint, other.fingerprint);

        let mut spec3 = toy_spec();
        spec3.train_subset = 48;
        let smaller = load_dataset(&spec3, Split::Train).unwrap();
        assert_ne!(train.fingerprint, smaller.fingerprint);
    }

    #[test]
    fn synthetic_shapes_and_balance() {
        let spec = toy_spec();
        let d = load_dataset(&spec, Split::Train).unwrap();
        assert_eq!(d.images.dim(), (64, 3, 12, 12));
        assert_eq!(d.labels.len(), 64);
        for k in 0..4 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 16);
        }
    }

    #[test]
    fn batch_gathers_rows() {
        let spec = toy_spec();
        let d = load_dataset(&spec, Split::Train).unwrap();
        let (x, y) = d.batch(&[3, 0, 10]);
        assert_eq!(x.dim(), (3, 3, 12, 12));
        assert_eq!(y, vec![d.labels[3], d.labels[0], d.labels[10]]);
        assert_eq!(
            x.index_axis(ndarray::Axis(0), 1),
            d.images.index_axis(ndarray::Axis(0), 0)
        );
    }

    #[test]
    fn validation_rejects_bad_specs() {
        let mut spec = toy_spec();
        spec.source = DataSource::Cifar10Binary;
        // K mismatch with the fixed source.
        assert!(spec.validate().is_err());
        spec.k = 10;
        // Image size mismatch.
        assert!(spec.validate().is_err());
        spec.image = 32;
        spec.train_subset = 60_000;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("exceed"), "{err}");
    }

    #[test]
    fn augmentation_is_seeded_and_in_range() {
        let spec = toy_spec();
        let d = load_dataset(&spec, Split::Train).unwrap();
        let (x0, _) = d.batch(&[0, 1, 2, 3]);
        let mut x1 = x0.clone();
        let mut x2 = x0.clone();
        let mut r1 = ChaCha20Rng::seed_from_u64(5);
        let mut r2 = ChaCha20Rng::seed_from_u64(5);
        augment_batch(&mut x1, &mut r1);
        augment_batch(&mut x2, &mut r2);
        assert_eq!(x1, x2);
        assert_ne!(x1, x0, "augmentation should move pixels");
        assert_eq!(x1.dim(), x0.dim());
    }
}
