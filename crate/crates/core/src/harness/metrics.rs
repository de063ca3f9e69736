use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean per-class recall over the classes present in `truth`.
///
/// Classes with no true samples are left out of the mean (and logged).
pub fn balanced_accuracy(truth: &[usize], predicted: &[usize], classes: usize) -> Result<f64> {
    if truth.is_empty() {
        return Err(Error::precondition("balanced accuracy of an empty set"));
    }
    if truth.len() != predicted.len() {
        return Err(Error::precondition(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    if let Some(&bad) = truth.iter().chain(predicted).find(|&&c| c >= classes) {
        return Err(Error::precondition(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut hits = vec![0usize; classes];
    let mut totals = vec![0usize; classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        totals[t] += 1;
        if t == p {
            hits[t] += 1;
        }
    }
    let absent: Vec<usize> = (0..classes).filter(|&c| totals[c] == 0).collect();
    if !absent.is_empty() {
        log::warn!("classes {absent:?} have no samples; excluded from balanced accuracy");
    }
    let recalls: Vec<f64> = (0..classes)
        .filter(|&c| totals[c] > 0)
        .map(|c| hits[c] as f64 / totals[c] as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Test accuracies of one method on one dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResults {
    pub method: String,
    pub dataset: String,
    /// Digest of the fold plan the runs used.
    pub plan_digest: String,
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub dataset: String,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
    /// 1 is best; ties share the mean of their positions.
    pub rank: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_dataset: Vec<MethodSummary>,
    pub average_rank: BTreeMap<String, f64>,
}

/// Mean ± std per (method, dataset), ranks within each dataset, and each
/// method's rank averaged over datasets.
pub fn aggregate(results: &[MethodResults]) -> Result<Summary> {
    let mut by_dataset: BTreeMap<&str, Vec<&MethodResults>> = BTreeMap::new();
    for r in results {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut per_dataset = Vec::new();
    let mut rank_sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (dataset, group) in by_dataset {
        let plan = &group[0].plan_digest;
        if let Some(other) = group.iter().find(|r| &r.plan_digest != plan) {
            return Err(Error::usage(format!(
                "dataset {dataset}: {} and {} used different fold plans",
                group[0].method, other.method
            )));
        }
        let stats: Vec<(f64, f64)> = group.iter().map(|r| mean_std(&r.accuracies)).collect();
        for (i, r) in group.iter().enumerate() {
            let mean = stats[i].0;
            let better = stats.iter().filter(|s| s.0 > mean).count();
            let tied = stats.iter().filter(|s| s.0 == mean).count();
            let rank = better as f64 + (tied as f64 + 1.0) / 2.0;
            let entry = rank_sums.entry(r.method.clone()).or_insert((0.0, 0));
            entry.0 += rank;
            entry.1 += 1;
            per_dataset.push(MethodSummary {
                method: r.method.clone(),
                dataset: dataset.to_string(),
                mean,
                std: stats[i].1,
                runs: r.accuracies.len(),
                rank,
            });
        }
    }
    let average_rank = rank_sums
        .into_iter()
        .map(|(m, (sum, n))| (m, sum / n as f64))
        .collect();
    Ok(Summary {
        per_dataset,
        average_rank,
    })
}
