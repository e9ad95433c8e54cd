//! Accuracy and confusion matrices on labeled sets.

use serde::{Deserialize, Serialize};

use crate::datamodel::LabeledSet;
use crate::error::{Error, Result};
use crate::first_step::predict_with;
use crate::nn::Classifier;
use crate::autodiff::ParamSet;
use crate::pseudolabel::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `None` for classes absent from the set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub num_samples: usize,
}

impl Evaluation {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], num_classes: usize) -> Result<Self> {
        if predicted.len() != labels.len() {
            return Err(Error::shape("predictions and labels differ in length"));
        }
        if labels.is_empty() {
            return Err(Error::config("cannot evaluate on an empty set"));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if p >= num_classes || y >= num_classes {
                return Err(Error::domain(format!("class index out of range ({p}, {y})")));
            }
            confusion[y][p] += 1;
        }
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let total: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..confusion.len()).map(|c| confusion[c][c]).sum();
        let per_class_accuracy = confusion
            .iter()
            .enumerate()
            .map(|(c, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| row[c] as f64 / n as f64)
            })
            .collect();
        Self {
            accuracy: correct as f64 / total.max(1) as f64,
            per_class_accuracy,
            confusion,
            num_samples: total,
        }
    }
}

/// Evaluates a classifier on its deterministic path.
pub fn evaluate<M: Classifier>(model: &M, params: &ParamSet, set: &LabeledSet) -> Result<Evaluation> {
    if set.labels.len() != set.len() {
        return Err(Error::config("evaluation set is missing labels"));
    }
    let probs = predict_with(model, params, &set.flat_inputs())?;
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    Evaluation::from_predictions(&predicted, &set.labels, model.num_classes())
}
