//! Top-1 evaluation with per-class breakdown.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::train::model::StudentModel;

/// Evaluation summary. `per_class[c]` is the accuracy over examples whose
/// true label is `c` (0 when the class has no examples).
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub n: usize,
    pub correct: usize,
}

/// Runs the model over the dataset in order (eval mode) and tallies top-1
/// accuracy. Explainer predictions go through the positive-probability rule.
pub fn evaluate(model: &mut StudentModel, data: &Dataset, batch_size: usize) -> Result<EvalReport> {
    if batch_size == 0 {
        return Err(Error::config("batch_size must be at least 1"));
    }
    if model.k() != data.k {
        return Err(Error::shape(format!(
            "model has {} classes, dataset has {}",
            model.k(),
            data.k
        )));
    }
    let mut class_total = vec![0usize; data.k];
    let mut class_correct = vec![0usize; data.k];
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = data.batch(chunk);
        let preds = model.predict(&x)?;
        for (pred, label) in preds.iter().zip(labels.iter()) {
            class_total[*label] += 1;
            if pred == label {
                class_correct[*label] += 1;
            }
        }
    }
    let n: usize = class_total.iter().sum();
    let correct: usize = class_correct.iter().sum();
    let per_class = class_total
        .iter()
        .zip(class_correct.iter())
        .map(|(&t, &c)| if t == 0 { 0.0 } else { c as f64 / t as f64 })
        .collect();
    Ok(EvalReport {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        per_class,
        n,
        correct,
    })
}
