mod common;

use std::collections::BTreeMap;

use dynprune_core::model::{batch_loss_and_gradient, ParameterVector, Sample};
use dynprune_core::pruning::{
    keep_count, score_molpeg, select_topk, ModelPair, PruneDecision, ScorerKind,
};
use dynprune_core::trainer::{
    train, train_full, Clock, Optimizer, SelectionMode, StepEvent, StepObserver, TrainConfig,
};
use dynprune_core::Error;

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        batch_size: 16,
        learning_rate: 0.1,
        clock: Clock::Work,
        seed: 7,
        ..TrainConfig::default()
    }
}

#[derive(Default)]
struct Log {
    selections: Vec<(Vec<usize>, f64, PruneDecision)>,
    online: Vec<ParameterVector>,
    reference: Vec<ParameterVector>,
    candidates: Vec<Vec<Sample>>,
    updated: Vec<ParameterVector>,
    history_last: Vec<Option<u64>>,
    steps: Vec<u64>,
}

impl StepObserver for Log {
    fn on_selection(&mut self, ids: &[usize], kf: f64, d: &PruneDecision) {
        self.selections.push((ids.to_vec(), kf, d.clone()));
    }

    fn on_step(&mut self, e: &StepEvent<'_>) {
        self.online.push(e.pair.online().clone());
        self.reference.push(e.pair.reference().clone());
        self.candidates
            .push(e.candidates.iter().map(|s| (*s).clone()).collect());
        self.updated.push(e.updated_online.clone());
        self.history_last.push(e.history.last_step());
        self.steps.push(e.step);
    }
}

#[test]
fn zero_ratio_matches_full_training_bitwise() {
    let data = common::small_mixture(400, 1);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 2);
    let cfg = config();
    let pruned = train(&data, &cfg, &spec, &init, None).unwrap();
    let full = train_full(&data.train(), &cfg, &spec, &init).unwrap();
    assert_eq!(pruned.pair.online(), &full);

    let random = TrainConfig {
        scorer: ScorerKind::SoftRandom,
        ..cfg.clone()
    };
    let other = train(&data, &random, &spec, &init, None).unwrap();
    assert_eq!(other.pair.online(), pruned.pair.online());
    for (a, b) in other.records.iter().zip(&pruned.records) {
        assert_eq!(
            (a.train_loss, a.val_metric, a.test_metric, a.selected_count),
            (b.train_loss, b.val_metric, b.test_metric, b.selected_count)
        );
    }
}

#[test]
fn reruns_are_identical() {
    let data = common::small_mixture(300, 4);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 5);
    for scorer in [
        ScorerKind::Molpeg,
        ScorerKind::SoftRandom,
        ScorerKind::Forgetting,
    ] {
        let cfg = TrainConfig {
            pruning_ratio: 0.6,
            scorer,
            ..config()
        };
        let a = train(&data, &cfg, &spec, &init, None).unwrap();
        let b = train(&data, &cfg, &spec, &init, None).unwrap();
        assert_eq!(a.records, b.records, "{scorer}");
        assert_eq!(a.pair.online(), b.pair.online());
    }
}

#[test]
fn one_batch_replays_by_hand() {
    let data = common::small_mixture(100, 9);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 1);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 1000,
        pruning_ratio: 0.7,
        ..config()
    };
    let mut log = Log::default();
    let out = train(&data, &cfg, &spec, &init, Some(&mut log)).unwrap();
    assert_eq!(log.steps, vec![0, 1]);

    let mut pair = ModelPair::new(init.clone(), cfg.beta).unwrap();
    for step in 0..2 {
        let batch = &log.candidates[step];
        assert_eq!(batch.len(), 80);
        let scores: BTreeMap<usize, f64> = batch
            .iter()
            .map(|s| (s.id, score_molpeg(s, &pair, &spec).unwrap()))
            .collect();
        if step == 0 {
            assert!(scores.values().all(|&v| v == 0.0));
        }
        let ids: Vec<usize> = batch.iter().map(|s| s.id).collect();
        let decision = select_topk(&scores, &ids, 0.3).unwrap();
        assert_eq!(decision.selected_ids.len(), 24);
        if step == 0 {
            let mut smallest = ids.clone();
            smallest.sort_unstable();
            assert_eq!(decision.selected_ids, smallest[..24]);
        }
        let chosen: Vec<&Sample> = batch
            .iter()
            .filter(|s| decision.is_selected(s.id))
            .collect();
        let (_, grad) = batch_loss_and_gradient(pair.online(), chosen, &spec).unwrap();
        let mut next = pair.online().clone();
        next.add_scaled(-cfg.learning_rate, &grad);
        assert_eq!(&next, &log.updated[step]);
        pair.set_online(next).unwrap();
        pair.ema_update().unwrap();
    }
    assert_eq!(pair.online(), out.pair.online());
    assert_eq!(pair.reference(), out.pair.reference());
    assert_eq!(out.records[0].selected_count, 24);
}

#[test]
fn reference_follows_ema_closed_form() {
    let data = common::small_mixture(200, 3);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 3);
    let cfg = TrainConfig {
        beta: 0.3,
        pruning_ratio: 0.5,
        ..config()
    };
    let mut log = Log::default();
    train(&data, &cfg, &spec, &init, Some(&mut log)).unwrap();
    // xi_t = (1 - b)^t theta_0 + sum_{k=1..t} b (1 - b)^(t - k) theta_k
    let b = cfg.beta;
    for t in 0..log.online.len() {
        let mut closed = log.online[0].scaled((1.0 - b).powi(t as i32));
        for k in 1..=t {
            closed.add_scaled(b * (1.0 - b).powi((t - k) as i32), &log.online[k]);
        }
        assert!(closed.sub(&log.reference[t]).norm() < 1e-12, "step {t}");
    }
}

#[test]
fn epoch_mode_trains_on_fixed_fraction() {
    let data = common::small_mixture(250, 6);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 6);
    let cfg = TrainConfig {
        pruning_ratio: 0.6,
        selection_mode: SelectionMode::Epoch,
        ..config()
    };
    let mut log = Log::default();
    let out = train(&data, &cfg, &spec, &init, Some(&mut log)).unwrap();
    let n = data.train().len();
    assert_eq!(log.selections.len(), cfg.epochs);
    for r in &out.records {
        assert_eq!(r.selected_count, keep_count(0.4, n));
    }
    // First selection sees the initial unit scores: lowest ids win the tie.
    let first = &log.selections[0].2;
    let mut ids = log.selections[0].0.clone();
    ids.sort_unstable();
    assert_eq!(first.selected_ids, ids[..keep_count(0.4, n)]);
}

#[test]
fn frozen_tracking_pair_breaks_ties_by_id() {
    let data = common::small_mixture(160, 8);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 8);
    let cfg = TrainConfig {
        beta: 1.0,
        learning_rate: 0.0,
        pruning_ratio: 0.75,
        ..config()
    };
    let mut log = Log::default();
    let out = train(&data, &cfg, &spec, &init, Some(&mut log)).unwrap();
    assert_eq!(out.pair.online(), &init);
    for (ids, _, d) in &log.selections {
        assert!(d.scores.values().all(|&v| v == 0.0));
        let mut sorted = ids.clone();
        sorted.sort_unstable();
        assert_eq!(d.selected_ids, sorted[..keep_count(0.25, ids.len())]);
        assert_eq!(d.delta, 0.0);
    }
    // Every history weight is (1 - 1)^k = 0, so nothing is retained.
    assert!(log.history_last.iter().all(Option::is_none));
    assert_eq!(out.history.ema_gradient(out.steps).unwrap().norm(), 0.0);
}

#[test]
fn history_records_every_step_in_order() {
    let data = common::small_mixture(160, 8);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 8);
    let cfg = TrainConfig {
        pruning_ratio: 0.5,
        history_truncation_tol: 0.0,
        ..config()
    };
    let mut log = Log::default();
    let out = train(&data, &cfg, &spec, &init, Some(&mut log)).unwrap();
    for (t, last) in log.history_last.iter().enumerate() {
        assert_eq!(*last, t.checked_sub(1).map(|v| v as u64));
    }
    let steps: Vec<u64> = out.history.entries().map(|(k, _)| k).collect();
    assert_eq!(steps, (0..out.steps).collect::<Vec<_>>());
}

#[test]
fn adam_run_moves_parameters() {
    let data = common::small_mixture(200, 2);
    let spec = common::tanh_mlp();
    let init = common::init(&spec, 2);
    let cfg = TrainConfig {
        optimizer: Optimizer::Adam,
        learning_rate: 0.01,
        pruning_ratio: 0.4,
        ..config()
    };
    let out = train(&data, &cfg, &spec, &init, None).unwrap();
    assert_ne!(out.pair.online(), &init);
    assert!(out.records.iter().all(|r| r.train_loss.is_finite()));
}

#[test]
fn regression_rejects_classification_scorers() {
    use dynprune_core::data::{split_dataset, Dataset};
    use dynprune_core::model::{init_params, Activation, ModelSpec, Target, Task};
    let samples = (0..50)
        .map(|i| {
            let x = i as f64 / 50.0;
            Sample::new(i, vec![x, 1.0 - x], Target::Value(2.0 * x - 0.5))
        })
        .collect();
    let data = split_dataset(
        &Dataset::new(samples, Task::Regression, 0).unwrap(),
        (0.8, 0.1, 0.1),
        0,
    )
    .unwrap();
    let spec = ModelSpec::new(2, vec![], 1, Task::Regression, Activation::Tanh).unwrap();
    let init = init_params(&spec, 0);
    let cfg = TrainConfig {
        pruning_ratio: 0.5,
        ..config()
    };
    let out = train(&data, &cfg, &spec, &init, None).unwrap();
    assert!(out.records.last().unwrap().val_metric >= 0.0);
    let bad = TrainConfig {
        scorer: ScorerKind::El2n,
        ..cfg
    };
    assert!(matches!(
        train(&data, &bad, &spec, &init, None),
        Err(Error::UnsupportedTask { .. })
    ));
}

#[test]
fn divergence_reports_epoch_and_batch() {
    use dynprune_core::data::{split_dataset, Dataset};
    use dynprune_core::model::{init_params, Activation, ModelSpec, Target, Task};
    let samples = (0..40)
        .map(|i| Sample::new(i, vec![1e3 * (i as f64 + 1.0)], Target::Value(1e3)))
        .collect();
    let data = split_dataset(
        &Dataset::new(samples, Task::Regression, 0).unwrap(),
        (0.8, 0.1, 0.1),
        0,
    )
    .unwrap();
    let spec = ModelSpec::new(1, vec![], 1, Task::Regression, Activation::Tanh).unwrap();
    let cfg = TrainConfig {
        learning_rate: 10.0,
        epochs: 50,
        ..config()
    };
    let err = train(&data, &cfg, &spec, &init_params(&spec, 0), None).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err}");
}
