//! Data ingestion, fold plans, the training loop, metrics and the
//! synthetic generator.

mod dataset;
mod folds;
mod metrics;
mod train;
mod zscore;

pub use dataset::{synth_dataset, Dataset, SynthSpec};
pub use folds::{stratified_cv, Fold, FoldPlan};
pub use metrics::{aggregate, balanced_accuracy, mean_std, MethodResults, MethodSummary, Summary};
pub use train::{
    prepare_split, run_cv, run_rng, train_run, CurvePoint, RunConfig, RunResult, Splits,
};
pub use zscore::{zscore_fit_apply, ZscoreStats};
