use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::Dataset;
use super::folds::{Fold, FoldPlan};
use super::metrics::balanced_accuracy;
use super::zscore::zscore_fit_apply;
use crate::embeddings::{compute_embedding, EmbeddingConfig, EmbeddingMethod, Preprocessing};
use crate::error::{Error, Result};
use crate::network::{
    class_weights, clip_gradients, lr_at, AdamWConfig, AdamWState, ClassWeights, ForwardCtx,
    ScheduleConfig,
};
use crate::numerics::{weighted_cross_entropy_value, Matrix, ParameterStore, Rng, Tape};
use crate::wpfs::{
    feature_importance, parameter_counts, total_loss, Architecture, ImportanceVector, Method,
    Model, ParameterCounts, DEFAULT_THRESHOLD,
};

/// Everything that determines a training run. Serialised as flat JSON;
/// missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub lambda: f64,
    pub embedding_method: EmbeddingMethod,
    pub embedding_size: usize,
    pub preprocessing: Preprocessing,
    pub histogram_bins: Option<usize>,
    pub nmf_iterations: usize,
    pub batch_size: usize,
    pub max_iterations: usize,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub clip_norm: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub decay_epochs: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch_norm: bool,
    pub classifier_hidden: Vec<usize>,
    pub aux_hidden: Vec<usize>,
    pub seed: u64,
    pub threshold: f64,
    pub folds: usize,
    pub repeats: usize,
    pub val_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let embedding = EmbeddingConfig::default();
        let schedule = ScheduleConfig::default();
        let arch = Architecture::default();
        RunConfig {
            method: Method::Wpfs,
            lambda: 3e-5,
            embedding_method: embedding.method,
            embedding_size: embedding.size,
            preprocessing: embedding.preprocessing,
            histogram_bins: embedding.bins,
            nmf_iterations: embedding.nmf_iterations,
            batch_size: 8,
            max_iterations: 10_000,
            patience: 200,
            clip_norm: 2.5,
            lr_start: schedule.lr_start,
            lr_end: schedule.lr_end,
            decay_epochs: schedule.decay_epochs,
            weight_decay: AdamWConfig::default().weight_decay,
            dropout: arch.dropout,
            batch_norm: arch.batch_norm,
            classifier_hidden: arch.classifier_hidden,
            aux_hidden: arch.aux_hidden,
            seed: 0,
            threshold: DEFAULT_THRESHOLD,
            folds: 5,
            repeats: 5,
            val_fraction: 0.1,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |what: &str| Err(Error::precondition(format!("invalid config: {what}")));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be a finite non-negative number");
        }
        if self.embedding_size == 0 || self.batch_size == 0 || self.max_iterations == 0 {
            return fail("embedding_size, batch_size and max_iterations must be positive");
        }
        if self.histogram_bins == Some(0) || self.nmf_iterations == 0 {
            return fail("histogram_bins and nmf_iterations must be positive");
        }
        if !(self.clip_norm > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("clip_norm must be positive and weight_decay non-negative");
        }
        if !self.schedule().is_valid() {
            return fail("learning-rate schedule needs positive rates and decay_epochs");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must lie in [0, 1)");
        }
        if self.classifier_hidden.is_empty() || self.classifier_hidden.contains(&0) {
            return fail("classifier_hidden needs at least one positive width");
        }
        if self.aux_hidden.contains(&0) {
            return fail("aux_hidden widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return fail("threshold must lie in [0, 1]");
        }
        if self.folds < 2 || self.repeats == 0 || !(0.0..1.0).contains(&self.val_fraction) {
            return fail("need folds >= 2, repeats >= 1 and val_fraction in [0, 1)");
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            classifier_hidden: self.classifier_hidden.clone(),
            aux_hidden: self.aux_hidden.clone(),
            dropout: self.dropout,
            batch_norm: self.batch_norm,
        }
    }

    pub fn embedding(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            method: self.embedding_method,
            size: self.embedding_size,
            preprocessing: self.preprocessing,
            bins: self.histogram_bins,
            nmf_iterations: self.nmf_iterations,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            lr_start: self.lr_start,
            lr_end: self.lr_end,
            decay_epochs: self.decay_epochs,
        }
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex::encode(Sha256::digest(&json))
    }
}

/// One row of a loss curve, recorded once per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// Optimiser steps taken so far.
    pub iteration: usize,
    /// Mean training objective over the epoch's steps.
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Normalised train/validation/test matrices of one fold.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train_x: Matrix,
    pub train_y: Vec<usize>,
    pub val_x: Matrix,
    pub val_y: Vec<usize>,
    pub test_x: Matrix,
    pub test_y: Vec<usize>,
    pub classes: usize,
}

/// Selects the fold's rows and z-scores them with training statistics.
pub fn prepare_split(dataset: &Dataset, fold: &Fold) -> Result<Splits> {
    let pick = |idx: &[usize]| -> (Matrix, Vec<usize>) {
        (
            dataset.x.select_rows(idx),
            idx.iter().map(|&i| dataset.y[i]).collect(),
        )
    };
    let (train_x, train_y) = pick(&fold.train);
    let (val_x, val_y) = pick(&fold.val);
    let (test_x, test_y) = pick(&fold.test);
    let (train_x, mut rest, _) = zscore_fit_apply(&train_x, &[&val_x, &test_x])?;
    let test_x = rest.pop().expect("two matrices in, two out");
    let val_x = rest.pop().expect("two matrices in, two out");
    Ok(Splits {
        train_x,
        train_y,
        val_x,
        val_y,
        test_x,
        test_y,
        classes: dataset.classes,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RunResult {
    pub method: Method,
    pub repeat: usize,
    pub fold: usize,
    pub test_balanced_accuracy: f64,
    pub best_val_loss: f64,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub epochs: usize,
    pub iterations: usize,
    pub curves: Vec<CurvePoint>,
    /// Absent for the plain MLP.
    pub importance: Option<ImportanceVector>,
    pub selected_fraction: Option<f64>,
    pub parameter_counts: Option<ParameterCounts>,
    /// Training objective after every optimiser step.
    #[serde(skip)]
    pub step_losses: Vec<f64>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
    #[serde(skip)]
    pub model: Option<Model>,
}

const STREAM_INIT: u64 = 0;
const STREAM_DROPOUT: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_EMBEDDING: u64 = 3;

fn validation_loss(model: &Model, x: &Matrix, y: &[usize], weights: &ClassWeights) -> Result<f64> {
    let probs = model.predict_proba(x)?;
    weighted_cross_entropy_value(&probs, y, weights.as_slice())
}

/// Trains one model on `splits` and evaluates the best-validation snapshot
/// on the test rows.
///
/// `rng` seeds everything: initialisation, dropout, batch order and the
/// embedding each draw from their own fork.
pub fn train_run(splits: &Splits, config: &RunConfig, rng: &Rng) -> Result<RunResult> {
    config.validate()?;
    let started = Instant::now();
    let n = splits.train_x.rows();
    if n == 0 || splits.val_x.rows() == 0 {
        return Err(Error::precondition(
            "training and validation splits must be non-empty",
        ));
    }
    let weights = class_weights(&splits.train_y, splits.classes)?;

    let embedding = if config.method.needs_embedding() {
        let mut embed_rng = rng.fork(STREAM_EMBEDDING);
        Some(compute_embedding(
            &splits.train_x,
            &config.embedding(),
            &mut embed_rng,
        )?)
    } else {
        None
    };
    let mut model = Model::build(
        config.method,
        config.architecture(),
        splits.train_x.cols(),
        splits.classes,
        embedding,
        &mut rng.fork(STREAM_INIT),
    )?;
    let mut dropout_rng = rng.fork(STREAM_DROPOUT);
    let mut shuffle_rng = rng.fork(STREAM_SHUFFLE);
    let mut optimiser = AdamWState::new(
        AdamWConfig {
            weight_decay: config.weight_decay,
            ..AdamWConfig::default()
        },
        model.params(),
    );
    let schedule = config.schedule();
    let skip_singletons = model.uses_batch_norm();

    let mut order: Vec<usize> = (0..n).collect();
    let mut curves = Vec::new();
    let mut step_losses = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;
    let mut since_best = 0;
    let mut iteration = 0;
    let mut epoch = 0;

    while iteration < config.max_iterations {
        let lr = lr_at(&schedule, epoch);
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        for batch in order.chunks(config.batch_size) {
            if iteration >= config.max_iterations {
                break;
            }
            if skip_singletons && batch.len() < 2 {
                continue;
            }
            let x = splits.train_x.select_rows(batch);
            let y: Vec<usize> = batch.iter().map(|&i| splits.train_y[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.input(x);
            let mut ctx = ForwardCtx::train(&mut dropout_rng);
            let out = model.forward(&mut tape, xv, &mut ctx)?;
            let loss = total_loss(
                &mut tape,
                out.probs,
                &y,
                &weights,
                out.scores,
                config.lambda,
            )?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    loss: value,
                    curves,
                });
            }
            let store = model.params_mut();
            ctx.commit(store)?;
            tape.backward(loss, store)?;
            clip_gradients(store, config.clip_norm)?;
            optimiser.step(store, lr)?;
            step_losses.push(value);
            epoch_loss += value;
            epoch_steps += 1;
            iteration += 1;
        }
        if epoch_steps == 0 {
            return Err(Error::precondition(format!(
                "no usable minibatch: {n} training rows with batch size {}",
                config.batch_size
            )));
        }

        let val = validation_loss(&model, &splits.val_x, &splits.val_y, &weights)?;
        if !val.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: val,
                curves,
            });
        }
        curves.push(CurvePoint {
            iteration,
            train_loss: epoch_loss / epoch_steps as f64,
            val_loss: val,
        });
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, epoch, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
        }
        epoch += 1;
        if since_best >= config.patience {
            break;
        }
    }

    let (best_val_loss, best_epoch, snapshot) = best.expect("at least one epoch ran");
    model.params_mut().copy_values_from(&snapshot)?;
    let predicted = model.predict(&splits.test_x)?;
    let test_balanced_accuracy = balanced_accuracy(&splits.test_y, &predicted, splits.classes)?;
    let (importance, counts) = match &model {
        Model::Wpfs(m) => (
            Some(feature_importance(m, config.threshold)?),
            Some(parameter_counts(m)),
        ),
        Model::Mlp(_) => (None, None),
    };
    Ok(RunResult {
        method: config.method,
        repeat: 0,
        fold: 0,
        test_balanced_accuracy,
        best_val_loss,
        best_epoch,
        epochs: epoch,
        iterations: iteration,
        curves,
        selected_fraction: importance.as_ref().map(|i| i.selected_fraction()),
        importance,
        parameter_counts: counts,
        step_losses,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        model: Some(model),
    })
}

/// Seed stream for the run at `index` of a fold plan.
pub fn run_rng(seed: u64, index: usize) -> Rng {
    Rng::new(seed).fork(1_000 + index as u64)
}

/// Trains every fold of `plan`, at most `jobs` at a time. Results come back
/// in plan order; `on_done` sees each one as it finishes, from one thread
/// at a time.
pub fn run_cv(
    dataset: &Dataset,
    plan: &FoldPlan,
    config: &RunConfig,
    jobs: usize,
    on_done: impl Fn(usize, &Result<RunResult>) + Sync,
) -> Vec<Result<RunResult>> {
    let total = plan.folds.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunResult>>>> =
        Mutex::new((0..total).map(|_| None).collect());
    let run_one = |index: usize| -> Result<RunResult> {
        let fold = &plan.folds[index];
        let splits = prepare_split(dataset, fold)?;
        let mut result = train_run(&splits, config, &run_rng(config.seed, index))?;
        result.repeat = fold.repeat;
        result.fold = fold.fold;
        Ok(result)
    };
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, total.max(1)) {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::Relaxed);
                if index >= total {
                    break;
                }
                let result = run_one(index);
                let mut slots = slots.lock().expect("no worker panicked");
                on_done(index, &result);
                slots[index] = Some(result);
            });
        }
    });
    slots
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every index was claimed"))
        .collect()
}
