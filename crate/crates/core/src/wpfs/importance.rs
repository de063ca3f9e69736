use std::io::Write;

use serde::{Deserialize, Serialize};

use super::model::{assemble_first_layer, WpfsModel};
use crate::error::Result;
use crate::network::Mode;

pub const DEFAULT_THRESHOLD: f64 = 0.95;

/// Global feature importance from the sparsity network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceVector {
    pub scores: Vec<f64>,
    pub threshold: f64,
    pub selected: Vec<usize>,
    /// False when the model has no sparsity network; scores are then all 1.
    pub available: bool,
}

impl ImportanceVector {
    pub fn from_scores(scores: Vec<f64>, threshold: f64, available: bool) -> Self {
        let selected = select(&scores, threshold);
        ImportanceVector {
            scores,
            threshold,
            selected,
            available,
        }
    }

    pub fn with_threshold(&self, threshold: f64) -> Self {
        Self::from_scores(self.scores.clone(), threshold, self.available)
    }

    pub fn selected_fraction(&self) -> f64 {
        if self.scores.is_empty() {
            0.0
        } else {
            self.selected.len() as f64 / self.scores.len() as f64
        }
    }

    /// Indices of the `k` highest scores, ties broken by lower index.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.scores.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }

    /// Counts of scores per equal-width bin over `[0, 1]`.
    pub fn histogram(&self, bins: usize) -> Vec<usize> {
        let mut counts = vec![0; bins];
        if bins == 0 {
            return counts;
        }
        for &s in &self.scores {
            let b = ((s.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
    }

    /// `feature_index,feature_name,score,selected`
    pub fn write_csv<W: Write>(&self, out: W, feature_names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["feature_index", "feature_name", "score", "selected"])?;
        for (j, &s) in self.scores.iter().enumerate() {
            let name = feature_names
                .get(j)
                .cloned()
                .unwrap_or_else(|| format!("f{j}"));
            let selected = s > self.threshold;
            w.write_record([
                j.to_string(),
                name,
                format!("{s:e}"),
                u8::from(selected).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn select(scores: &[f64], threshold: f64) -> Vec<usize> {
    scores
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > threshold)
        .map(|(j, _)| j)
        .collect()
}

/// Scores from the sparsity network in evaluation mode.
pub fn feature_importance(model: &WpfsModel, threshold: f64) -> Result<ImportanceVector> {
    let (_, scores) = assemble_first_layer(model, Mode::Eval, None)?;
    Ok(ImportanceVector::from_scores(
        scores,
        threshold,
        model.net.use_spn,
    ))
}
