//! CIFAR binary-format readers.
//!
//! CIFAR-10: 3073-byte records (1 label byte + 3x1024 pixel bytes,
//! plane-major R, G, B). CIFAR-100: 3074-byte records (coarse label, fine
//! label, pixels); the fine label is used. Pixels scale to [0, 1];
//! normalization happens in [`super::load_dataset`].

use std::path::{Path, PathBuf};

use ndarray::Array4;

use super::Split;
use crate::error::{Error, Result};

const IMG: usize = 32;
const PIXELS: usize = 3 * IMG * IMG;

struct RecordLayout {
    /// Bytes per record including labels.
    stride: usize,
    /// Offset of the label byte to use within the record.
    label_at: usize,
    /// Largest valid label.
    max_label: u8,
}

const CIFAR10: RecordLayout = RecordLayout { stride: 1 + PIXELS, label_at: 0, max_label: 9 };
const CIFAR100: RecordLayout = RecordLayout { stride: 2 + PIXELS, label_at: 1, max_label: 99 };

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Ingestion {
        offset: 0,
        message: format!("cannot read {}: {e}", path.display()),
    })
}

/// Parses whole records from one batch file, appending to `images`/`labels`
/// until `want` records are collected (`want` = usize::MAX takes all).
fn parse_batch(
    path: &Path,
    layout: &RecordLayout,
    want: usize,
    images: &mut Vec<f64>,
    labels: &mut Vec<usize>,
) -> Result<()> {
    let bytes = read_file(path)?;
    if bytes.len() % layout.stride != 0 {
        return Err(Error::Ingestion {
            offset: (bytes.len() - bytes.len() % layout.stride) as u64,
            message: format!(
                "{}: truncated record ({} trailing bytes, expected {}-byte records)",
                path.display(),
                bytes.len() % layout.stride,
                layout.stride
            ),
        });
    }
    for (ri, rec) in bytes.chunks_exact(layout.stride).enumerate() {
        if labels.len() >= want {
            break;
        }
        let label = rec[layout.label_at];
        if label > layout.max_label {
            return Err(Error::Ingestion {
                offset: (ri * layout.stride + layout.label_at) as u64,
                message: format!(
                    "{}: label {label} exceeds {}",
                    path.display(),
                    layout.max_label
                ),
            });
        }
        labels.push(label as usize);
        let header = layout.stride - PIXELS;
        images.extend(rec[header..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(())
}

fn to_tensor(images: Vec<f64>, n: usize) -> Array4<f64> {
    Array4::from_shape_vec((n, 3, IMG, IMG), images).expect("record-aligned pixel data")
}

fn train_files_cifar10(root: &Path) -> Vec<PathBuf> {
    (1..=5).map(|i| root.join(format!("data_batch_{i}.bin"))).collect()
}

pub fn load_cifar10(root: &Path, split: Split, subset: usize) -> Result<(Array4<f64>, Vec<usize>)> {
    let want = if subset == 0 { usize::MAX } else { subset };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    match split {
        Split::Train => {
            for path in train_files_cifar10(root) {
                if labels.len() >= want {
                    break;
                }
                parse_batch(&path, &CIFAR10, want, &mut images, &mut labels)?;
            }
        }
        Split::Test => {
            parse_batch(&root.join("test_batch.bin"), &CIFAR10, want, &mut images, &mut labels)?;
        }
    }
    if subset != 0 && labels.len() < subset {
        return Err(Error::Ingestion {
            offset: (labels.len() * CIFAR10.stride) as u64,
            message: format!("requested {subset} records, files hold {}", labels.len()),
        });
    }
    let n = labels.len();
    Ok((to_tensor(images, n), labels))
}

pub fn load_cifar100(root: &Path, split: Split, subset: usize) -> Result<(Array4<f64>, Vec<usize>)> {
    let want = if subset == 0 { usize::MAX } else { subset };
    let file = match split {
        Split::Train => "train.bin",
        Split::Test => "test.bin",
    };
    let mut images = Vec::new();
    let mut labels = Vec::new();
    parse_batch(&root.join(file), &CIFAR100, want, &mut images, &mut labels)?;
    if subset != 0 && labels.len() < subset {
        return Err(Error::Ingestion {
            offset: (labels.len() * CIFAR100.stride) as u64,
            message: format!("requested {subset} records, file holds {}", labels.len()),
        });
    }
    let n = labels.len();
    Ok((to_tensor(images, n), labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_dataset, DataSource, DatasetSpec, CIFAR_MEAN, CIFAR_STD};

    /// Two hand-crafted CIFAR-10 records: label, then R/G/B planes filled
    /// with single values so every pixel is predictable.
    fn fixture_record(label: u8, r: u8, g: u8, b: u8) -> Vec<u8> {
        let mut rec = vec![label];
        rec.extend(std::iter::repeat(r).take(1024));
        rec.extend(std::iter::repeat(g).take(1024));
        rec.extend(std::iter::repeat(b).take(1024));
        rec
    }

    #[test]
    fn hand_crafted_records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = fixture_record(3, 255, 0, 128);
        bytes.extend(fixture_record(7, 10, 20, 30));
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();

        let (images, labels) = load_cifar10(dir.path(), Split::Test, 0).unwrap();
        assert_eq!(labels, vec![3, 7]);
        assert_eq!(images.dim(), (2, 3, 32, 32));
        assert!((images[(0, 0, 0, 0)] - 1.0).abs() < 1e-12);
        assert!((images[(0, 1, 14, 9)] - 0.0).abs() < 1e-12);
        assert!((images[(0, 2, 31, 31)] - 128.0 / 255.0).abs() < 1e-12);
        assert!((images[(1, 0, 5, 5)] - 10.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn truncated_file_reports_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = fixture_record(1, 9, 9, 9);
        bytes.extend(&fixture_record(2, 8, 8, 8)[..100]); // cut mid-record
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let err = load_cifar10(dir.path(), Split::Test, 0).unwrap_err();
        match err {
            Error::Ingestion { offset, message } => {
                assert_eq!(offset, 3073);
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected ingestion error, got {other}"),
        }
    }

    #[test]
    fn bad_label_reports_its_offset() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = fixture_record(0, 1, 1, 1);
        bytes.extend(fixture_record(11, 1, 1, 1)); // label out of range
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let err = load_cifar10(dir.path(), Split::Test, 0).unwrap_err();
        match err {
            Error::Ingestion { offset, .. } => assert_eq!(offset, 3073),
            other => panic!("expected ingestion error, got {other}"),
        }
    }

    #[test]
    fn missing_file_is_an_ingestion_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_cifar10(dir.path(), Split::Test, 0).unwrap_err();
        assert!(matches!(err, Error::Ingestion { .. }));
    }

    #[test]
    fn cifar100_uses_the_fine_label() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = vec![5u8, 42u8]; // coarse 5, fine 42
        rec.extend(std::iter::repeat(100u8).take(3072));
        std::fs::write(dir.path().join("test.bin"), &rec).unwrap();
        let (_, labels) = load_cifar100(dir.path(), Split::Test, 0).unwrap();
        assert_eq!(labels, vec![42]);
    }

    #[test]
    fn normalization_applies_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("test_batch.bin"), fixture_record(0, 255, 0, 128)).unwrap();
        let spec = DatasetSpec {
            source: DataSource::Cifar10Binary,
            root: dir.path().to_path_buf(),
            train_subset: 0,
            test_subset: 0,
            k: 10,
            image: 32,
            seed: 0,
            normalize_mean: CIFAR_MEAN,
            normalize_std: CIFAR_STD,
            augment: false,
        };
        let d = load_dataset(&spec, Split::Test).unwrap();
        let expect = (1.0 - CIFAR_MEAN[0]) / CIFAR_STD[0];
        assert!((d.images[(0, 0, 0, 0)] - expect).abs() < 1e-12);
    }

    #[test]
    fn subset_truncates_and_insufficient_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = fixture_record(1, 1, 1, 1);
        bytes.extend(fixture_record(2, 2, 2, 2));
        std::fs::write(dir.path().join("test_batch.bin"), &bytes).unwrap();
        let (_, labels) = load_cifar10(dir.path(), Split::Test, 1).unwrap();
        assert_eq!(labels, vec![1]);
        assert!(load_cifar10(dir.path(), Split::Test, 3).is_err());
    }
}
