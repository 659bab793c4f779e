//! Accuracy, macro-F1 and confusion matrices.

use serde::{Deserialize, Serialize};

use crate::chaos::ImageTensor;
use crate::error::{contract_err, Result};
use crate::finetune::{predict_all, Classify};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
}

impl MetricsReport {
    /// A class whose precision and recall are both zero (or undefined)
    /// scores an F1 of 0.
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let m = confusion.len();
        if m == 0 || confusion.iter().any(|row| row.len() != m) {
            return contract_err("confusion matrix must be square and non-empty");
        }
        let total: u64 = confusion.iter().flatten().sum();
        if total == 0 {
            return contract_err("confusion matrix counts no samples");
        }
        let trace: u64 = (0..m).map(|i| confusion[i][i]).sum();
        let f1_sum: f64 = (0..m)
            .map(|c| {
                let tp = confusion[c][c] as f64;
                let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
                let actual: u64 = confusion[c].iter().sum();
                let precision = if predicted > 0 { tp / predicted as f64 } else { 0.0 };
                let recall = if actual > 0 { tp / actual as f64 } else { 0.0 };
                if precision + recall > 0.0 {
                    2.0 * precision * recall / (precision + recall)
                } else {
                    0.0
                }
            })
            .sum();
        Ok(MetricsReport {
            accuracy: trace as f64 / total as f64,
            macro_f1: f1_sum / m as f64,
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.is_empty() || truth.len() != predicted.len() {
            return contract_err(format!(
                "{} labels against {} predictions",
                truth.len(),
                predicted.len()
            ));
        }
        let mut confusion = vec![vec![0u64; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            if t >= num_classes || p >= num_classes {
                return contract_err(format!("class index outside {num_classes} classes"));
            }
            confusion[t][p] += 1;
        }
        Self::from_confusion(confusion)
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

/// Runs `model` over a labeled set and tabulates the results.
pub fn evaluate<C: Classify + ?Sized>(model: &C, images: &[ImageTensor], labels: &[usize]) -> Result<MetricsReport> {
    if images.is_empty() {
        return contract_err("cannot evaluate on an empty test set");
    }
    if images.len() != labels.len() {
        return contract_err(format!("{} images with {} labels", images.len(), labels.len()));
    }
    let predicted = predict_all(model, images)?;
    MetricsReport::from_predictions(labels, &predicted, model.num_classes())
}
