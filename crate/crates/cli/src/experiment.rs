use std::fs;
use std::path::Path;
use std::sync::Mutex;

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};
use wpfs_core::harness::{
    aggregate, mean_std, run_cv, stratified_cv, Dataset, MethodResults, RunConfig, RunResult,
};
use wpfs_core::wpfs::persist::write_model;
use wpfs_core::Error;

use crate::args::{CvArgs, ExperimentArgs, SweepArgs};
use crate::manifest::{
    timestamp, Aggregate, DatasetInfo, ExperimentManifest, LabelMapping, PlanInfo, RunFiles,
    RunRecord,
};
use crate::output::OutDir;
use crate::{resolve_seed, Abort};

pub fn cmd_cv(args: CvArgs) -> Result<()> {
    let (mut config, dataset) = load(&args.experiment)?;
    if let Some(lambda) = args.lambda {
        config.lambda = lambda;
    }
    config.validate()?;
    let out = OutDir::create(&args.experiment.out)?;
    let outcome = run_experiment(&dataset, &config, &args.experiment, &out, "cv")?;
    report(&outcome.manifest);
    outcome.into_result()
}

pub fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.lambdas.is_empty() {
        bail!("--lambdas needs at least one value");
    }
    if let Some(bad) = args.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        bail!("--lambdas: {bad} is not a finite value >= 0");
    }
    if args.score_bins == 0 {
        bail!("--score-bins must be positive");
    }
    let (base, dataset) = load(&args.experiment)?;
    base.validate()?;
    let out = OutDir::create(&args.experiment.out)?;

    let mut summary = csv::Writer::from_writer(Vec::new());
    summary.write_record(["lambda", "mean_bacc", "std_bacc", "mean_selected_fraction"])?;
    let mut aborted = 0;
    for &lambda in &args.lambdas {
        let config = RunConfig {
            lambda,
            ..base.clone()
        };
        let tag = format!("lambda_{lambda:e}");
        info!("sweep: λ = {lambda}");
        let outcome = run_experiment(
            &dataset,
            &config,
            &args.experiment,
            &out.subdir(&tag)?,
            "sweep",
        )?;
        report(&outcome.manifest);
        aborted += outcome.aborted;

        let (mean, std, fraction) = match &outcome.manifest.aggregate {
            Some(a) => (
                a.mean_balanced_accuracy.to_string(),
                a.std_balanced_accuracy.to_string(),
                a.mean_selected_fraction
                    .map(|f| f.to_string())
                    .unwrap_or_default(),
            ),
            None => Default::default(),
        };
        summary.write_record([lambda.to_string(), mean, std, fraction])?;

        let mut counts = vec![0usize; args.score_bins];
        let mut any = false;
        for result in outcome.results.iter().flatten() {
            if let Some(importance) = result.importance.as_ref().filter(|i| i.available) {
                any = true;
                for (c, h) in counts.iter_mut().zip(importance.histogram(args.score_bins)) {
                    *c += h;
                }
            }
        }
        if any {
            out.write_with(&format!("histograms/{tag}.csv"), |w| {
                let mut w = csv::Writer::from_writer(w);
                w.write_record(["bin_start", "bin_end", "count"])?;
                let width = 1.0 / args.score_bins as f64;
                for (b, count) in counts.iter().enumerate() {
                    w.write_record([
                        (b as f64 * width).to_string(),
                        ((b + 1) as f64 * width).to_string(),
                        count.to_string(),
                    ])?;
                }
                w.flush()?;
                Ok(())
            })?;
        }
    }
    let bytes = summary.into_inner().map_err(|e| anyhow!("{e}"))?;
    out.write_with("sweep_summary.csv", |w| {
        std::io::Write::write_all(w, &bytes)?;
        Ok(())
    })?;
    if aborted > 0 {
        return Err(Abort(format!(
            "{aborted} run(s) aborted across the sweep; see the manifests"
        ))
        .into());
    }
    Ok(())
}

/// Reads the config file and dataset and applies flag overrides.
fn load(args: &ExperimentArgs) -> Result<(RunConfig, Dataset)> {
    let (mut config, file_seed) = match &args.config {
        Some(path) => read_config(path)?,
        None => (RunConfig::default(), None),
    };
    if let Some(method) = args.method {
        config.method = method;
    }
    config.seed = resolve_seed(args.seed.or(file_seed))?;
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let dataset = Dataset::load_csv(&args.data, &args.label_col)?;
    Ok((config, dataset))
}

/// The config and the seed it sets, if any.
fn read_config(path: &Path) -> Result<(RunConfig, Option<u64>)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("config {} is not valid JSON", path.display()))?;
    let has_seed = value.get("seed").is_some();
    let config: RunConfig =
        serde_json::from_value(value).with_context(|| format!("config {}", path.display()))?;
    Ok((config.clone(), has_seed.then_some(config.seed)))
}

struct Outcome {
    manifest: ExperimentManifest,
    results: Vec<wpfs_core::Result<RunResult>>,
    aborted: usize,
}

impl Outcome {
    fn into_result(self) -> Result<()> {
        if self.aborted > 0 {
            return Err(Abort(format!(
                "{} of {} run(s) aborted; partial outputs are flagged in the manifest",
                self.aborted,
                self.results.len()
            ))
            .into());
        }
        Ok(())
    }
}

fn run_files(config: &RunConfig, save_models: bool, repeat: usize, fold: usize) -> RunFiles {
    let stem = format!("r{repeat}_f{fold}");
    let spn = config.method.flags().is_some_and(|(_, spn)| spn);
    RunFiles {
        curves: Some(format!("curves/{stem}.csv")),
        importance: spn.then(|| format!("importance/{stem}.csv")),
        model: save_models.then(|| format!("models/{stem}.wpfs")),
    }
}

fn write_curves(out: &OutDir, rel: &str, curves: &[wpfs_core::harness::CurvePoint]) -> Result<()> {
    out.write_with(rel, |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["iteration", "train_loss", "val_loss"])?;
        for p in curves {
            w.write_record([
                p.iteration.to_string(),
                p.train_loss.to_string(),
                p.val_loss.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })
}

/// Writes the files of one finished run. Called by one thread at a time.
fn collect(
    out: &OutDir,
    dataset: &Dataset,
    files: &RunFiles,
    result: &wpfs_core::Result<RunResult>,
) -> Result<()> {
    let curves_file = files.curves.as_deref().expect("curves are always written");
    match result {
        Ok(run) => {
            write_curves(out, curves_file, &run.curves)?;
            if let (Some(rel), Some(importance)) = (&files.importance, &run.importance) {
                out.write_with(
                    rel,
                    |w| Ok(importance.write_csv(w, &dataset.feature_names)?),
                )?;
            }
            if let (Some(rel), Some(model)) = (&files.model, &run.model) {
                out.write_with(rel, |w| Ok(write_model(w, model, &dataset.feature_names)?))?;
            }
        }
        Err(Error::Diverged { curves, .. }) => write_curves(out, curves_file, curves)?,
        Err(_) => {}
    }
    Ok(())
}

fn run_experiment(
    dataset: &Dataset,
    config: &RunConfig,
    args: &ExperimentArgs,
    out: &OutDir,
    command: &str,
) -> Result<Outcome> {
    let started_at = timestamp();
    let plan = stratified_cv(
        &dataset.y,
        config.folds,
        config.repeats,
        config.val_fraction,
        config.seed,
    )?;
    let total = plan.folds.len();
    info!(
        "{}: {total} runs on {} samples × {} features, {} job(s)",
        config.method,
        dataset.samples(),
        dataset.features(),
        args.jobs
    );

    let write_error: Mutex<Option<anyhow::Error>> = Mutex::new(None);
    let results = run_cv(dataset, &plan, config, args.jobs, |index, result| {
        let fold = &plan.folds[index];
        let files = run_files(config, args.save_models, fold.repeat, fold.fold);
        match result {
            Ok(r) => info!(
                "run {}/{total} (repeat {}, fold {}): balanced accuracy {:.4}, best epoch {}",
                index + 1,
                fold.repeat,
                fold.fold,
                r.test_balanced_accuracy,
                r.best_epoch
            ),
            Err(e) => warn!(
                "run {}/{total} (repeat {}, fold {}) aborted: {e}",
                index + 1,
                fold.repeat,
                fold.fold
            ),
        }
        if let Err(e) = collect(out, dataset, &files, result) {
            write_error.lock().expect("collector lock").get_or_insert(e);
        }
    });
    if let Some(e) = write_error.into_inner().expect("collector lock") {
        return Err(e);
    }

    let mut runs = Vec::with_capacity(total);
    let mut accuracies = Vec::new();
    let mut fractions = Vec::new();
    for (index, result) in results.iter().enumerate() {
        let fold = &plan.folds[index];
        let files = run_files(config, args.save_models, fold.repeat, fold.fold);
        match result {
            Ok(r) => {
                accuracies.push(r.test_balanced_accuracy);
                fractions.extend(r.selected_fraction);
                runs.push(RunRecord::from_result(index, r, files));
            }
            Err(e) => {
                let files = RunFiles {
                    curves: matches!(e, Error::Diverged { .. })
                        .then_some(files.curves)
                        .flatten(),
                    ..RunFiles::default()
                };
                runs.push(RunRecord::aborted(
                    index,
                    fold.repeat,
                    fold.fold,
                    e.to_string(),
                    files,
                ));
            }
        }
    }
    let aborted = total - accuracies.len();

    let aggregate_block = if accuracies.is_empty() {
        None
    } else {
        let results = MethodResults {
            method: config.method.name().to_string(),
            dataset: dataset.digest(),
            plan_digest: plan.digest(),
            accuracies: accuracies.clone(),
        };
        let summary = aggregate(std::slice::from_ref(&results))?;
        let (mean, std) = mean_std(&accuracies);
        Some(Aggregate {
            method: config.method.name().to_string(),
            completed_runs: accuracies.len(),
            total_runs: total,
            mean_balanced_accuracy: mean,
            std_balanced_accuracy: std,
            mean_selected_fraction: (!fractions.is_empty()).then(|| mean_std(&fractions).0),
            results,
            summary,
        })
    };

    let manifest = ExperimentManifest {
        tool: "wpfs".to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: command.to_string(),
        started_at,
        finished_at: timestamp(),
        seed: config.seed,
        config: config.clone(),
        config_digest: config.digest(),
        dataset: DatasetInfo {
            path: args.data.display().to_string(),
            digest: dataset.digest(),
            samples: dataset.samples(),
            features: dataset.features(),
            classes: dataset.classes,
            label_column: args.label_col.clone(),
            labels: dataset
                .class_names
                .iter()
                .enumerate()
                .map(|(class, label)| LabelMapping {
                    label: label.clone(),
                    class,
                })
                .collect(),
        },
        fold_plan: PlanInfo::from(&plan),
        complete: aborted == 0,
        runs,
        aggregate: aggregate_block,
    };
    out.write_json("manifest.json", &manifest)?;
    Ok(Outcome {
        manifest,
        results,
        aborted,
    })
}

fn report(manifest: &ExperimentManifest) {
    match &manifest.aggregate {
        Some(a) => {
            let fraction = a
                .mean_selected_fraction
                .map(|f| format!(", selected fraction {f:.4}"))
                .unwrap_or_default();
            println!(
                "{} λ={}: balanced accuracy {:.4} ± {:.4} over {}/{} runs{fraction}",
                a.method,
                manifest.config.lambda,
                a.mean_balanced_accuracy,
                a.std_balanced_accuracy,
                a.completed_runs,
                a.total_runs
            );
        }
        None => println!("{}: no run completed", manifest.config.method),
    }
}
