use std::path::Path;

use dynprune_core::data::{
    apply_shift, generate_gaussian_mixture, load_csv, random_class_means, split_dataset, CsvSchema,
    Dataset, GaussianMixtureConfig,
};
use dynprune_core::model::{init_params, ModelSpec, ParameterVector, Task};
use dynprune_core::pruning::PruneDecision;
use dynprune_core::trainer::{
    evaluate, time_efficiency, train, train_full, EpochRecord, EvalMetric, StepObserver,
    TrainConfig,
};
use dynprune_core::ScorerKind;
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, ExperimentConfig, GeneratedData};
use crate::CliError;

/// Source and (unsplit) target datasets of a generated recipe.
pub fn generate_datasets(g: &GeneratedData) -> Result<(Dataset, Dataset), CliError> {
    let means = random_class_means(
        g.means_seed(),
        g.n_classes,
        g.n_features,
        g.class_separation,
    );
    let mixture = |seed, n_samples| GaussianMixtureConfig {
        seed,
        n_samples,
        n_features: g.n_features,
        n_classes: g.n_classes,
        class_means: means.clone(),
        class_cov_scale: g.class_cov_scale,
    };
    let source = generate_gaussian_mixture(&mixture(g.source_seed(), g.source_samples))?;
    let base = generate_gaussian_mixture(&mixture(g.target_seed(), g.target_samples))?;
    let mean_shift =
        random_class_means(g.shift_seed(), 1, g.n_features, g.mean_shift_scale).remove(0);
    let target = apply_shift(&base, &g.shift_spec(mean_shift), g.shift_seed())?;
    Ok((source, target))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub metric: String,
    /// Pretrained model on the held-out part of the source data.
    pub source_test_metric: f64,
    /// Pretrained model on the target test split, before finetuning.
    pub target_zero_shot_metric: f64,
}

/// Everything shared by the runs of one experiment: the split target data,
/// the model shape and the (pretrained) starting parameters.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub target: Dataset,
    pub spec: ModelSpec,
    pub init: ParameterVector,
    pub pretrain: Option<PretrainSummary>,
}

fn load(path: &Path, schema: &CsvSchema) -> Result<Dataset, CliError> {
    Ok(load_csv(path, schema)?)
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, CliError> {
    let (source, target) = match &config.data {
        DataConfig::Generated(g) => {
            let (s, t) = generate_datasets(g)?;
            (Some(s), t)
        }
        DataConfig::Csv(c) => {
            let source = c
                .source
                .as_deref()
                .map(|p| load(p, &c.schema))
                .transpose()?;
            (source, load(&c.target, &c.schema)?)
        }
    };
    if let Some(s) = &source {
        if s.n_features() != target.n_features() || s.task != target.task {
            return Err(CliError::Config(
                "source and target datasets have different shapes".into(),
            ));
        }
    }
    let output_dim = match target.task {
        Task::Classification => target
            .num_classes
            .max(source.as_ref().map_or(0, |s| s.num_classes)),
        Task::Regression => 1,
    };
    let spec = ModelSpec::new(
        target.n_features(),
        config.model.hidden_dims.clone(),
        output_dim,
        target.task,
        config.model.activation,
    )
    .map_err(|e| CliError::Config(e.to_string()))?;
    let target = split_dataset(&target, config.split.fractions, config.split.seed)?;
    let metric = config
        .train
        .metric
        .unwrap_or_else(|| EvalMetric::default_for(spec.task));

    let mut init = init_params(&spec, config.model.init_seed);
    let mut pretrain = None;
    if let (Some(source), true) = (source, config.pretrain.enabled) {
        let source = split_dataset(&source, config.split.fractions, config.split.seed)?;
        let p = &config.pretrain;
        let cfg = TrainConfig {
            epochs: p.epochs,
            learning_rate: p.learning_rate,
            batch_size: p.batch_size,
            seed: p.seed,
            ..config.train.clone()
        };
        init = train_full(&source.train(), &cfg, &spec, &init)?;
        pretrain = Some(PretrainSummary {
            metric: metric.name().to_string(),
            source_test_metric: evaluate(&init, &source.test(), &spec, metric)?.value,
            target_zero_shot_metric: evaluate(&init, &target.test(), &spec, metric)?.value,
        });
    }
    Ok(Prepared {
        target,
        spec,
        init,
        pretrain,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellKey {
    pub scorer: ScorerKind,
    pub pruning_ratio: f64,
    pub beta: f64,
    pub seed: u64,
}

impl CellKey {
    pub fn of(config: &TrainConfig) -> Self {
        Self {
            scorer: config.scorer,
            pruning_ratio: config.pruning_ratio,
            beta: config.beta,
            seed: config.seed,
        }
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        TrainConfig {
            scorer: self.scorer,
            pruning_ratio: self.pruning_ratio,
            beta: self.beta,
            seed: self.seed,
            ..base.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub metric: String,
    pub records: Vec<EpochRecord>,
    /// Final-epoch metrics.
    pub val_metric: f64,
    pub test_metric: f64,
    pub wall_time_seconds: f64,
    pub time_efficiency: f64,
}

/// Finetunes the prepared starting point on the target train split.
pub fn run_cell(
    prepared: &Prepared,
    base: &TrainConfig,
    key: CellKey,
    observer: Option<&mut dyn StepObserver>,
) -> Result<CellResult, CliError> {
    let config = key.apply(base);
    let metric = config
        .metric
        .unwrap_or_else(|| EvalMetric::default_for(prepared.spec.task));
    let outcome = train(
        &prepared.target,
        &config,
        &prepared.spec,
        &prepared.init,
        observer,
    )?;
    let last = outcome
        .records
        .last()
        .ok_or_else(|| CliError::Run("training produced no epochs".into()))?;
    let wall_time_seconds = outcome.total_time_seconds();
    Ok(CellResult {
        key,
        metric: metric.name().to_string(),
        val_metric: last.val_metric,
        test_metric: last.test_metric,
        wall_time_seconds,
        time_efficiency: time_efficiency(wall_time_seconds)?,
        records: outcome.records,
    })
}

/// Audits every selection against the keep-count and dominance contract,
/// recomputing the keep count in exact integer arithmetic.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionAudit {
    pub decisions: u64,
    pub violations: u64,
    /// First few violation descriptions.
    pub examples: Vec<String>,
}

impl SelectionAudit {
    fn violation(&mut self, message: String) {
        self.violations += 1;
        if self.examples.len() < 10 {
            self.examples.push(message);
        }
    }

    pub fn merge(&mut self, other: &SelectionAudit) {
        self.decisions += other.decisions;
        self.violations += other.violations;
        for e in &other.examples {
            if self.examples.len() < 10 {
                self.examples.push(e.clone());
            }
        }
    }

    pub fn check(&mut self, ids: &[usize], keep_fraction: f64, decision: &PruneDecision) {
        self.decisions += 1;
        // keep fraction on a 1e-9 grid, then ceil(n * kf) exactly
        let kf_units = (keep_fraction * 1e9).round() as u128;
        let n = ids.len() as u128;
        let expected = ((n * kf_units).div_ceil(1_000_000_000)).max(1) as usize;
        let selected = &decision.selected_ids;
        if selected.len() != expected {
            self.violation(format!(
                "kept {} of {} (expected {expected})",
                selected.len(),
                ids.len()
            ));
        }
        if !selected.windows(2).all(|w| w[0] < w[1]) || !selected.iter().all(|id| ids.contains(id))
        {
            self.violation("selected ids not a sorted subset of the candidates".into());
            return;
        }
        let score = |id: &usize| decision.scores[id];
        let min_selected = selected.iter().map(score).fold(f64::INFINITY, f64::min);
        if decision.delta != min_selected {
            self.violation(format!(
                "delta {} differs from min selected score {min_selected}",
                decision.delta
            ));
        }
        for id in ids.iter().filter(|id| !decision.is_selected(**id)) {
            let s = score(id);
            for kept in selected {
                let k = score(kept);
                if s > k || (s == k && id < kept) {
                    self.violation(format!(
                        "unselected {id} ({s}) outranks selected {kept} ({k})"
                    ));
                    return;
                }
            }
        }
    }
}

impl StepObserver for SelectionAudit {
    fn on_selection(&mut self, ids: &[usize], keep_fraction: f64, decision: &PruneDecision) {
        self.check(ids, keep_fraction, decision);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn decision(selected: Vec<usize>, scores: &[(usize, f64)], delta: f64) -> PruneDecision {
        PruneDecision {
            selected_ids: selected,
            delta,
            scores: scores.iter().copied().collect::<BTreeMap<_, _>>(),
        }
    }

    #[test]
    fn audit_accepts_valid_and_flags_invalid_decisions() {
        let scores = [(0, 0.5), (1, 0.9), (2, 0.5), (3, 0.1)];
        let ids = [0, 1, 2, 3];
        let mut audit = SelectionAudit::default();
        audit.check(&ids, 0.5, &decision(vec![0, 1], &scores, 0.5));
        assert_eq!(audit.violations, 0);
        // tie at 0.5 must go to the smaller id
        audit.check(&ids, 0.5, &decision(vec![1, 2], &scores, 0.5));
        assert_eq!(audit.violations, 1);
        // wrong cardinality: ceil(0.3 * 4) = 2
        audit.check(&ids, 0.3, &decision(vec![1], &scores, 0.9));
        assert_eq!(audit.violations, 2);
        assert_eq!(audit.decisions, 3);
    }

    #[test]
    fn audit_keep_count_ignores_float_noise() {
        let ids: Vec<usize> = (0..10).collect();
        let scores: Vec<(usize, f64)> = ids.iter().map(|&i| (i, 10.0 - i as f64)).collect();
        let mut audit = SelectionAudit::default();
        audit.check(&ids, 1.0 - 0.7, &decision(vec![0, 1, 2], &scores, 8.0));
        assert_eq!(audit.violations, 0, "{:?}", audit.examples);
    }

    #[test]
    fn generated_recipe_is_deterministic() {
        let g = GeneratedData {
            source_samples: 50,
            target_samples: 20,
            ..GeneratedData::default()
        };
        let a = generate_datasets(&g).unwrap();
        let b = generate_datasets(&g).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.0.len(), a.1.len()), (50, 20));
    }
}
