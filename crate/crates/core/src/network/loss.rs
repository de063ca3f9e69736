use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{weighted_cross_entropy_value, Matrix};

/// Positive per-class loss weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(Vec<f64>);

impl ClassWeights {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if let Some(c) = weights.iter().position(|&w| !(w > 0.0) || !w.is_finite()) {
            return Err(Error::precondition(format!(
                "class weight {c} must be positive, got {}",
                weights[c]
            )));
        }
        Ok(ClassWeights(weights))
    }

    pub fn uniform(classes: usize) -> Self {
        ClassWeights(vec![1.0; classes])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Balanced weights `N / (C · n_c)`; every class must occur in `labels`.
pub fn class_weights(labels: &[usize], classes: usize) -> Result<ClassWeights> {
    let mut counts = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::precondition(format!(
                "label {y} at position {i} is out of range for {classes} classes"
            )));
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&n| n == 0) {
        return Err(Error::precondition(format!(
            "class {missing} has no samples"
        )));
    }
    let n = labels.len() as f64;
    ClassWeights::new(
        counts
            .iter()
            .map(|&nc| n / (classes as f64 * nc as f64))
            .collect(),
    )
}

/// Weighted cross-entropy of row-stochastic predictions.
pub fn weighted_cross_entropy(
    probs: &Matrix,
    labels: &[usize],
    weights: &ClassWeights,
) -> Result<f64> {
    for i in 0..probs.rows() {
        let total: f64 = probs.row(i).iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::precondition(format!(
                "row {i} of the predictions sums to {total}, not 1"
            )));
        }
    }
    weighted_cross_entropy_value(probs, labels, weights.as_slice())
}
