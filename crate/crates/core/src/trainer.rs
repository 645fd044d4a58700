//! Dynamic-pruning training loop.
//!
//! Two selection granularities are supported:
//!
//! * [`SelectionMode::Batch`] scores every sample of each shuffled batch with
//!   the current online/reference pair, keeps the top `1 - pruning_ratio`
//!   fraction and takes one optimizer step on the kept samples.
//! * [`SelectionMode::Epoch`] keeps a persistent score per sample (initially
//!   1). At the start of each epoch the top fraction of the whole train split
//!   is selected from those scores; training then iterates plain batches of
//!   the selected subset and refreshes the scores of the samples it visits.
//!
//! In both modes the reference model is updated after the online step, and
//! the selected-subset mean gradient is appended to the gradient history.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::metrics::{accuracy, average_precision, mae, roc_auc, MetricResult};
use crate::model::{
    argmax, batch_loss_and_gradient, predict, softmax, ModelSpec, ParameterVector, Sample, Target,
    Task,
};
use crate::optim::{adam_step, sgd_step, AdamConfig, AdamState};
use crate::pruning::{
    select_topk, GradientHistory, ModelPair, PruneDecision, Scorer, ScorerKind,
    DEFAULT_TRUNCATION_TOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    Batch,
    Epoch,
}

/// Source of the `wall_time_seconds` figures.
///
/// `Work` charges a fixed nanosecond per parameter per sample pass (forward
/// = 1 pass, backward = 2), which makes timing columns reproducible.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    Wall,
    Work,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMetric {
    Accuracy,
    RocAuc,
    AveragePrecision,
    Mae,
}

impl EvalMetric {
    pub fn default_for(task: Task) -> Self {
        match task {
            Task::Classification => EvalMetric::Accuracy,
            Task::Regression => EvalMetric::Mae,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EvalMetric::Accuracy => "accuracy",
            EvalMetric::RocAuc => "roc_auc",
            EvalMetric::AveragePrecision => "average_precision",
            EvalMetric::Mae => "mae",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Fraction of samples removed per selection.
    pub pruning_ratio: f64,
    pub beta: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub scorer: ScorerKind,
    pub optimizer: Optimizer,
    pub selection_mode: SelectionMode,
    pub seed: u64,
    pub adam_betas: (f64, f64),
    pub adam_eps: f64,
    pub clock: Clock,
    /// Defaults to accuracy (classification) or MAE (regression).
    pub metric: Option<EvalMetric>,
    pub history_truncation_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pruning_ratio: 0.0,
            beta: 0.5,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 64,
            scorer: ScorerKind::Molpeg,
            optimizer: Optimizer::Sgd,
            selection_mode: SelectionMode::Batch,
            seed: 0,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
            clock: Clock::Work,
            metric: None,
            history_truncation_tol: DEFAULT_TRUNCATION_TOL,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.pruning_ratio) {
            return Err(Error::precondition(format!(
                "pruning_ratio must lie in [0, 1), got {}",
                self.pruning_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::precondition(format!(
                "beta must lie in [0, 1], got {}",
                self.beta
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::precondition(
                "learning_rate must be finite and non-negative",
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::precondition(
                "epochs and batch_size must be positive",
            ));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2) && self.adam_eps > 0.0) {
            return Err(Error::precondition(
                "adam betas must lie in [0, 1) and eps must be positive",
            ));
        }
        Ok(())
    }

    pub fn keep_fraction(&self) -> f64 {
        1.0 - self.pruning_ratio
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            betas: self.adam_betas,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
}

impl DeltaStats {
    fn from_values(values: &[f64]) -> Self {
        let min = values.iter().copied().fold(f64::INFINITY, f64::min);
        let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        Self { min, mean, max }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub selected_count: usize,
    pub wall_time_seconds: f64,
    pub delta_stats: DeltaStats,
}

/// State visible to an observer after each optimizer step.
pub struct StepEvent<'a> {
    pub epoch: usize,
    pub batch_index: usize,
    /// Global batch step `t` (0-based).
    pub step: u64,
    /// Samples scored at this step: the whole batch in batch mode, the
    /// visited batch of the selected subset in epoch mode.
    pub candidates: &'a [&'a Sample],
    /// The decision governing this step (per batch or per epoch).
    pub decision: &'a PruneDecision,
    /// Scores computed at this step, keyed by id.
    pub scores: &'a BTreeMap<usize, f64>,
    /// Online and reference parameters used for scoring (`theta_t`, `xi_t`).
    pub pair: &'a ModelPair,
    /// Mean gradient of the selected samples at `theta_t`.
    pub selected_gradient: &'a ParameterVector,
    /// `theta_{t+1}`.
    pub updated_online: &'a ParameterVector,
    /// History holding steps `< t`.
    pub history: &'a GradientHistory,
}

pub trait StepObserver {
    fn on_selection(
        &mut self,
        _candidate_ids: &[usize],
        _keep_fraction: f64,
        _decision: &PruneDecision,
    ) {
    }

    fn on_step(&mut self, _event: &StepEvent<'_>) {}
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub pair: ModelPair,
    pub history: GradientHistory,
    pub steps: u64,
}

impl TrainOutcome {
    pub fn total_time_seconds(&self) -> f64 {
        self.records.iter().map(|r| r.wall_time_seconds).sum()
    }
}

/// `1000 / runtime_seconds`.
pub fn time_efficiency(runtime_seconds: f64) -> Result<f64> {
    if !(runtime_seconds > 0.0 && runtime_seconds.is_finite()) {
        return Err(Error::precondition(format!(
            "runtime must be positive and finite, got {runtime_seconds}"
        )));
    }
    Ok(1000.0 / runtime_seconds)
}

/// Metric of the online parameters over `samples`.
pub fn evaluate(
    params: &ParameterVector,
    samples: &[&Sample],
    spec: &ModelSpec,
    metric: EvalMetric,
) -> Result<MetricResult> {
    let n = samples.len();
    let value = match metric {
        EvalMetric::Mae => {
            let mut preds = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for s in samples {
                let Target::Value(y) = s.target else {
                    return Err(Error::precondition("mae requires regression targets"));
                };
                preds.push(predict(params, &s.features, spec)?[0]);
                targets.push(y);
            }
            mae(&preds, &targets)?
        }
        EvalMetric::Accuracy => {
            let mut preds = Vec::with_capacity(n);
            let mut targets = Vec::with_capacity(n);
            for s in samples {
                let Target::Class(c) = s.target else {
                    return Err(Error::precondition("accuracy requires class targets"));
                };
                preds.push(argmax(&predict(params, &s.features, spec)?));
                targets.push(c);
            }
            accuracy(&preds, &targets)?
        }
        EvalMetric::RocAuc | EvalMetric::AveragePrecision => {
            if spec.output_dim != 2 {
                return Err(Error::precondition(format!(
                    "{} requires a binary classifier",
                    metric.name()
                )));
            }
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for s in samples {
                let Target::Class(c) = s.target else {
                    return Err(Error::precondition("ranking metrics require class targets"));
                };
                scores.push(softmax(&predict(params, &s.features, spec)?)[1]);
                labels.push(c == 1);
            }
            if metric == EvalMetric::RocAuc {
                roc_auc(&scores, &labels)?
            } else {
                average_precision(&scores, &labels)?
            }
        }
    };
    Ok(MetricResult {
        name: metric.name().to_string(),
        value,
        n_samples: n,
    })
}

/// Epoch-wise shuffled index order shared by the pruned and unpruned loops.
struct Shuffler {
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl Shuffler {
    fn new(n: usize, seed: u64) -> Self {
        Self {
            order: (0..n).collect(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn next_epoch(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

fn scoring_passes(kind: ScorerKind) -> u64 {
    match kind {
        ScorerKind::SoftRandom => 0,
        ScorerKind::Molpeg => 2,
        ScorerKind::Grand => 3,
        _ => 1,
    }
}

struct Timer {
    clock: Clock,
    started: Instant,
    passes: u64,
    param_count: usize,
}

impl Timer {
    fn start(clock: Clock, param_count: usize) -> Self {
        Self {
            clock,
            started: Instant::now(),
            passes: 0,
            param_count,
        }
    }

    fn charge(&mut self, passes: u64) {
        self.passes += passes;
    }

    fn seconds(&self) -> f64 {
        let raw = match self.clock {
            Clock::Wall => self.started.elapsed().as_secs_f64(),
            Clock::Work => self.passes as f64 * self.param_count as f64 * 1e-9,
        };
        raw.max(1e-9)
    }
}

fn optimizer_step(
    config: &TrainConfig,
    adam: &mut AdamState,
    params: &ParameterVector,
    grad: &ParameterVector,
) -> Result<ParameterVector> {
    match config.optimizer {
        Optimizer::Sgd => sgd_step(params, grad, config.learning_rate),
        Optimizer::Adam => adam_step(adam, params, grad, &config.adam()),
    }
}

fn abort(epoch: usize, batch: usize, err: Error) -> Error {
    match err {
        Error::NumericalOverflow(message) => Error::Training {
            epoch,
            batch,
            message,
        },
        other => other,
    }
}

/// Runs the dynamic-pruning loop on the train split and evaluates the online
/// model on the validation and test splits after every epoch.
pub fn train(
    dataset: &Dataset,
    config: &TrainConfig,
    spec: &ModelSpec,
    init: &ParameterVector,
    mut observer: Option<&mut dyn StepObserver>,
) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    check_len("initial parameters", spec.param_count(), init.len())?;
    if !config.scorer.supports(spec.task) {
        return Err(Error::UnsupportedTask {
            scorer: config.scorer.to_string(),
            task: spec.task.to_string(),
        });
    }
    let train_set = dataset.train();
    let (val_set, test_set) = (dataset.val(), dataset.test());
    if train_set.is_empty() || val_set.is_empty() || test_set.is_empty() {
        return Err(Error::precondition(
            "dataset needs non-empty train, val and test splits",
        ));
    }
    let metric = config
        .metric
        .unwrap_or_else(|| EvalMetric::default_for(spec.task));
    let keep_fraction = config.keep_fraction();

    let mut pair = ModelPair::new(init.clone(), config.beta)?;
    let mut history = GradientHistory::new(init.len(), config.beta, config.history_truncation_tol)?;
    let mut scorer = Scorer::new(config.scorer, config.seed);
    let mut adam = AdamState::new(init.len());
    let mut persistent: BTreeMap<usize, f64> = train_set.iter().map(|s| (s.id, s.score)).collect();
    let train_ids: Vec<usize> = train_set.iter().map(|s| s.id).collect();
    let mut shuffler = Shuffler::new(train_set.len(), config.seed);
    let mut records = Vec::with_capacity(config.epochs);
    let mut step: u64 = 0;

    for epoch in 0..config.epochs {
        let mut timer = Timer::start(config.clock, init.len());
        let mut deltas = Vec::new();
        let mut loss_sum = 0.0;
        let mut selected_count = 0usize;

        // Epoch mode restricts the epoch to a subset chosen up front.
        let epoch_decision = match config.selection_mode {
            SelectionMode::Batch => None,
            SelectionMode::Epoch => {
                let decision = select_topk(&persistent, &train_ids, keep_fraction)?;
                if let Some(obs) = observer.as_deref_mut() {
                    obs.on_selection(&train_ids, keep_fraction, &decision);
                }
                deltas.push(decision.delta);
                Some(decision)
            }
        };
        let order: Vec<&Sample> = shuffler
            .next_epoch()
            .iter()
            .map(|&i| train_set[i])
            .filter(|s| {
                epoch_decision
                    .as_ref()
                    .map_or(true, |d| d.is_selected(s.id))
            })
            .collect();

        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let mut scores = BTreeMap::new();
            for s in batch {
                let score = scorer
                    .score(s, &pair, spec)
                    .map_err(|e| abort(epoch, batch_index, e))?;
                scores.insert(s.id, score);
            }
            timer.charge(scoring_passes(config.scorer) * batch.len() as u64);

            let batch_decision;
            let (decision, selected): (&PruneDecision, Vec<&Sample>) = match &epoch_decision {
                Some(d) => {
                    persistent.extend(scores.iter().map(|(k, v)| (*k, *v)));
                    (d, batch.to_vec())
                }
                None => {
                    let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
                    batch_decision = select_topk(&scores, &ids, keep_fraction)?;
                    if let Some(obs) = observer.as_deref_mut() {
                        obs.on_selection(&ids, keep_fraction, &batch_decision);
                    }
                    deltas.push(batch_decision.delta);
                    let chosen = batch
                        .iter()
                        .copied()
                        .filter(|s| batch_decision.is_selected(s.id))
                        .collect();
                    (&batch_decision, chosen)
                }
            };

            let (loss, grad) =
                batch_loss_and_gradient(pair.online(), selected.iter().copied(), spec)
                    .map_err(|e| abort(epoch, batch_index, e))?;
            timer.charge(3 * selected.len() as u64);
            let updated = optimizer_step(config, &mut adam, pair.online(), &grad)?;
            if !updated.is_finite() || !grad.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_index,
                    message: "non-finite parameters after optimizer step".into(),
                });
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs.on_step(&StepEvent {
                    epoch,
                    batch_index,
                    step,
                    candidates: batch,
                    decision,
                    scores: &scores,
                    pair: &pair,
                    selected_gradient: &grad,
                    updated_online: &updated,
                    history: &history,
                });
            }
            loss_sum += loss * selected.len() as f64;
            selected_count += selected.len();

            pair.set_online(updated)?;
            pair.ema_update()?;
            history.accumulate(grad, step)?;
            pair.advance_step();
            step += 1;
        }

        let wall_time_seconds = timer.seconds();
        records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / selected_count as f64,
            val_metric: evaluate(pair.online(), &val_set, spec, metric)?.value,
            test_metric: evaluate(pair.online(), &test_set, spec, metric)?.value,
            selected_count,
            wall_time_seconds,
            delta_stats: DeltaStats::from_values(&deltas),
        });
    }

    Ok(TrainOutcome {
        records,
        pair,
        history,
        steps: step,
    })
}

/// Full-data training without scoring or a reference model; used for
/// source pretraining and as the unpruned baseline. Batches and their order
/// match [`train`] for the same seed.
pub fn train_full(
    samples: &[&Sample],
    config: &TrainConfig,
    spec: &ModelSpec,
    init: &ParameterVector,
) -> Result<ParameterVector> {
    config.validate()?;
    spec.validate()?;
    check_len("initial parameters", spec.param_count(), init.len())?;
    if samples.is_empty() {
        return Err(Error::precondition("train_full requires samples"));
    }
    let mut params = init.clone();
    let mut adam = AdamState::new(init.len());
    let mut shuffler = Shuffler::new(samples.len(), config.seed);
    for epoch in 0..config.epochs {
        let order: Vec<&Sample> = shuffler.next_epoch().iter().map(|&i| samples[i]).collect();
        for (batch_index, batch) in order.chunks(config.batch_size).enumerate() {
            let (_, grad) = batch_loss_and_gradient(&params, batch.iter().copied(), spec)
                .map_err(|e| abort(epoch, batch_index, e))?;
            params = optimizer_step(config, &mut adam, &params, &grad)?;
            if !params.is_finite() {
                return Err(Error::Training {
                    epoch,
                    batch: batch_index,
                    message: "non-finite parameters after optimizer step".into(),
                });
            }
        }
    }
    Ok(params)
}
