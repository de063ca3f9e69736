use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use wpfs_core::harness::{FoldPlan, MethodResults, RunConfig, RunResult, Summary};
use wpfs_core::wpfs::ParameterCounts;

/// Record of one cross-validation experiment. Every numeric field is a
/// function of `config` and the dataset bytes behind `dataset.digest`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub started_at: String,
    pub finished_at: String,
    pub seed: u64,
    pub config: RunConfig,
    pub config_digest: String,
    pub dataset: DatasetInfo,
    pub fold_plan: PlanInfo,
    /// False when any run aborted; their rows carry `status: "aborted"`.
    pub complete: bool,
    pub runs: Vec<RunRecord>,
    pub aggregate: Option<Aggregate>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub path: String,
    /// SHA-256 over the parsed matrix, labels and names.
    pub digest: String,
    pub samples: usize,
    pub features: usize,
    pub classes: usize,
    pub label_column: String,
    /// Class index of every label string, in first-appearance order.
    pub labels: Vec<LabelMapping>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelMapping {
    pub label: String,
    pub class: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PlanInfo {
    pub folds: usize,
    pub repeats: usize,
    pub val_fraction: f64,
    pub seed: u64,
    pub digest: String,
}

impl From<&FoldPlan> for PlanInfo {
    fn from(plan: &FoldPlan) -> Self {
        PlanInfo {
            folds: plan.k,
            repeats: plan.repeats,
            val_fraction: plan.val_fraction,
            seed: plan.seed,
            digest: plan.digest(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Aborted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub index: usize,
    pub repeat: usize,
    pub fold: usize,
    pub status: RunStatus,
    pub error: Option<String>,
    pub test_balanced_accuracy: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs: Option<usize>,
    pub iterations: Option<usize>,
    pub selected_fraction: Option<f64>,
    pub selected_count: Option<usize>,
    pub parameter_counts: Option<ParameterCounts>,
    /// Relative to the manifest's directory. Partial for aborted runs.
    pub curves_file: Option<String>,
    pub importance_file: Option<String>,
    pub model_file: Option<String>,
}

impl RunRecord {
    pub fn from_result(index: usize, result: &RunResult, files: RunFiles) -> Self {
        let importance = result.importance.as_ref().filter(|i| i.available);
        RunRecord {
            index,
            repeat: result.repeat,
            fold: result.fold,
            status: RunStatus::Ok,
            error: None,
            test_balanced_accuracy: Some(result.test_balanced_accuracy),
            best_val_loss: Some(result.best_val_loss),
            best_epoch: Some(result.best_epoch),
            epochs: Some(result.epochs),
            iterations: Some(result.iterations),
            selected_fraction: result.selected_fraction,
            selected_count: importance.map(|i| i.selected.len()),
            parameter_counts: result.parameter_counts,
            curves_file: files.curves,
            importance_file: files.importance,
            model_file: files.model,
        }
    }

    pub fn aborted(
        index: usize,
        repeat: usize,
        fold: usize,
        error: String,
        files: RunFiles,
    ) -> Self {
        RunRecord {
            index,
            repeat,
            fold,
            status: RunStatus::Aborted,
            error: Some(error),
            test_balanced_accuracy: None,
            best_val_loss: None,
            best_epoch: None,
            epochs: None,
            iterations: None,
            selected_fraction: None,
            selected_count: None,
            parameter_counts: None,
            curves_file: files.curves,
            importance_file: None,
            model_file: None,
        }
    }
}

/// Files written for one run, relative to the experiment directory.
#[derive(Clone, Debug, Default)]
pub struct RunFiles {
    pub curves: Option<String>,
    pub importance: Option<String>,
    pub model: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub completed_runs: usize,
    pub total_runs: usize,
    pub mean_balanced_accuracy: f64,
    /// Population standard deviation over completed runs.
    pub std_balanced_accuracy: f64,
    pub mean_selected_fraction: Option<f64>,
    /// Input to `aggregate()` when comparing manifests.
    pub results: MethodResults,
    pub summary: Summary,
}

pub fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}
