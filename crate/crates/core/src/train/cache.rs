//! Teacher logit cache: per-example logits keyed by a dataset fingerprint,
//! so students can distill without re-running the teacher.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::model::{StudentForward, StudentModel};

/// Cached teacher logits for one dataset split. JSON on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitCache {
    /// Fingerprint of the dataset the logits were computed on.
    pub fingerprint: String,
    /// Class count (logit row width).
    pub k: usize,
    /// One row per example, in dataset order.
    pub logits: Vec<Vec<f64>>,
}

impl LogitCache {
    pub fn rows(&self) -> usize {
        self.logits.len()
    }

    /// Checks that this cache belongs to `data`; a mismatch is a stale-cache
    /// error naming what differs.
    pub fn validate_for(&self, data: &Dataset) -> Result<()> {
        if self.fingerprint != data.fingerprint {
            return Err(Error::StaleCache(format!(
                "dataset fingerprint {} does not match cache fingerprint {}",
                data.fingerprint, self.fingerprint
            )));
        }
        if self.k != data.k {
            return Err(Error::StaleCache(format!(
                "cache has {} classes, dataset has {}",
                self.k, data.k
            )));
        }
        if self.logits.len() != data.len() {
            return Err(Error::StaleCache(format!(
                "cache has {} rows, dataset has {} examples",
                self.logits.len(),
                data.len()
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cache: LogitCache = serde_json::from_str(&text)?;
        for (i, row) in cache.logits.iter().enumerate() {
            if row.len() != cache.k {
                return Err(Error::validation(format!(
                    "logit cache row {i} has {} entries, expected {}",
                    row.len(),
                    cache.k
                )));
            }
        }
        Ok(cache)
    }
}

/// Evaluates the teacher over the whole dataset (in order, eval mode) and
/// returns the logit cache. Explainer models produce binary head logits, not
/// class logits, so they cannot serve as teachers.
pub fn cache_teacher_logits(
    teacher: &mut StudentModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<LogitCache> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if teacher.k() != data.k {
        return Err(Error::shape(format!(
            "teacher has {} classes, dataset has {}",
            teacher.k(),
            data.k
        )));
    }
    let mut logits = Vec::with_capacity(data.len());
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, _) = data.batch(chunk);
        match teacher.forward(&x, false)? {
            StudentForward::Logits(z) => {
                for row in z.rows() {
                    logits.push(row.to_vec());
                }
            }
            StudentForward::HeadLogits(_) => {
                return Err(Error::config(
                    "explainer models emit binary head logits and cannot serve as teachers",
                ));
            }
        }
    }
    Ok(LogitCache {
        fingerprint: data.fingerprint.clone(),
        k: data.k,
        logits,
    })
}
