//! End-to-end acceptance run on the shipped recipe. Prints one PASS/FAIL
//! line per criterion and fails if any criterion fails.

use std::fs;
use std::time::{Duration, Instant};

use dynprune::commands::{aggregate_rows, read_run_rows, sweep, AggregateRow};
use dynprune::experiment::{prepare, Prepared};
use dynprune::ExperimentConfig;
use dynprune_core::metrics::{average_precision, roc_auc};
use dynprune_core::model::{
    init_params, per_sample_gradient, Activation, ModelSpec, Sample, Target, Task,
};
use dynprune_core::theory::{
    check_drift_bound, check_grand_bound, check_projection, displacement_identity_error,
    finite_difference_oracle, relative_error, residual_scaling, run_instrumented, InstrumentedRun,
    SelectionBasis,
};
use dynprune_core::trainer::TrainConfig;
use dynprune_core::ScorerKind;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

fn gradient_oracle() -> (bool, String) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let d = rng.gen_range(1..=6);
        let hidden: Vec<usize> = (0..rng.gen_range(0..=2))
            .map(|_| rng.gen_range(1..=6))
            .collect();
        let classify = rng.gen_bool(0.5);
        let (task, out) = if classify {
            (Task::Classification, rng.gen_range(2..=4))
        } else {
            (Task::Regression, 1)
        };
        let spec = ModelSpec::new(d, hidden, out, task, Activation::Tanh).unwrap();
        let params = init_params(&spec, rng.gen());
        let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let target = if classify {
            Target::Class(rng.gen_range(0..out))
        } else {
            Target::Value(rng.gen_range(-2.0..2.0))
        };
        let sample = Sample::new(case, x, target);
        let analytic = per_sample_gradient(&params, &sample, &spec).unwrap();
        let numeric = finite_difference_oracle(&params, &sample, &spec, 1e-5).unwrap();
        for (a, n) in analytic.as_slice().iter().zip(numeric.as_slice()) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    let elapsed = start.elapsed();
    (
        worst <= 1e-5 && elapsed < Duration::from_secs(10),
        format!(
            "max relative error {worst:.2e}, {:.2}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn theory_base(config: &ExperimentConfig) -> TrainConfig {
    TrainConfig {
        learning_rate: config.verify.learning_rate,
        ..config.train.clone()
    }
}

fn instrument(prepared: &Prepared, cfg: &TrainConfig, steps: usize) -> InstrumentedRun {
    run_instrumented(&prepared.target, cfg, &prepared.spec, &prepared.init, steps).unwrap()
}

fn identity(run: &InstrumentedRun) -> (bool, String) {
    let worst = (0..run.steps.len())
        .map(|t| displacement_identity_error(run, t).unwrap())
        .fold(0.0f64, f64::max);
    (
        worst <= 1e-10 && run.beta() == 0.5 && run.steps.len() == 200,
        format!(
            "{} steps at beta {}, max error {worst:.2e}",
            run.steps.len(),
            run.beta()
        ),
    )
}

fn drift(prepared: &Prepared, base: &TrainConfig, steps: usize) -> (bool, String) {
    let mut passed = true;
    let mut parts = Vec::new();
    for beta in [0.25, 0.5, 0.9] {
        let run = instrument(
            prepared,
            &TrainConfig {
                beta,
                ..base.clone()
            },
            steps,
        );
        let report = check_drift_bound(&run);
        passed &= report.violations == 0 && report.records.len() == steps;
        parts.push(format!("beta {beta}: {} violations", report.violations));
    }
    (passed, parts.join(", "))
}

fn scaling(prepared: &Prepared, config: &ExperimentConfig) -> (bool, String) {
    let start = Instant::now();
    let cfg = TrainConfig {
        learning_rate: config.verify.scaling_learning_rate,
        ..theory_base(config)
    };
    let report = residual_scaling(
        &prepared.target,
        &cfg,
        &prepared.spec,
        &prepared.init,
        config.verify.scaling_steps,
    )
    .unwrap();
    let elapsed = start.elapsed();
    let ratio = report.ratio.unwrap_or(f64::NAN);
    (
        (3.5..=4.5).contains(&ratio) && elapsed < Duration::from_secs(120),
        format!("ratio {ratio:.4}, {:.2}s", elapsed.as_secs_f64()),
    )
}

fn projection_signs(run: &InstrumentedRun) -> (bool, String) {
    let exact = (1..=50)
        .filter(|&t| {
            check_projection(run, t, SelectionBasis::FirstOrder)
                .unwrap()
                .sign_pattern_holds(0.0)
        })
        .count();
    let mut checked = 0;
    let mut within = 0;
    for t in 1..run.steps.len() {
        let r = check_projection(run, t, SelectionBasis::Recorded).unwrap();
        checked += 1;
        if r.sign_pattern_holds(r.residual_budget) {
            within += 1;
        }
    }
    let fraction = within as f64 / checked as f64;
    (
        exact == 50 && fraction >= 0.95,
        format!("first-order {exact}/50 exact, {within}/{checked} within budget"),
    )
}

fn cauchy_schwarz(run: &InstrumentedRun) -> (bool, String) {
    let (mut samples, mut violations) = (0, 0);
    for t in 0..run.steps.len() {
        let r = check_grand_bound(run, t).unwrap();
        samples += r.records.len();
        violations += r.cauchy_schwarz_violations;
    }
    (
        violations == 0 && samples > 0,
        format!("{violations} violations over {samples} scored samples"),
    )
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut auc_mismatch = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=50);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        if roc_auc(&scores, &labels).unwrap() != brute_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }
    let worked = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    // precision at each positive, averaged over positives
    let ap_cases: [(&[f64], &[bool], f64); 5] = [
        (&[0.9, 0.8, 0.1], &[true, true, false], 1.0),
        (&[0.2, 0.9], &[true, false], 0.5),
        (
            &[0.9, 0.8, 0.7, 0.6],
            &[true, false, true, false],
            (1.0 + 2.0 / 3.0) / 2.0,
        ),
        (
            &[0.1, 0.2, 0.3, 0.4],
            &[true, false, false, true],
            (1.0 + 2.0 / 4.0) / 2.0,
        ),
        (
            &[0.5, 0.9, 0.3, 0.8, 0.1],
            &[true, false, true, false, true],
            (1.0 / 3.0 + 2.0 / 4.0 + 3.0 / 5.0) / 3.0,
        ),
    ];
    let ap_mismatch = ap_cases
        .iter()
        .filter(|(s, l, want)| (average_precision(s, l).unwrap() - want).abs() > 1e-12)
        .count();
    (
        auc_mismatch == 0 && worked == 0.75 && ap_mismatch == 0,
        format!("auc mismatches {auc_mismatch}/200, worked example {worked}, ap mismatches {ap_mismatch}/5"),
    )
}

fn cell(rows: &[AggregateRow], scorer: ScorerKind, p: f64) -> f64 {
    rows.iter()
        .find(|r| r.scorer == scorer && r.pruning_ratio == p)
        .map(|r| 100.0 * r.test_mean)
        .unwrap_or(f64::NAN)
}

fn trend(rows: &[AggregateRow], n_seeds: usize, elapsed: Duration) -> (bool, String) {
    let (m, r) = (ScorerKind::Molpeg, ScorerKind::SoftRandom);
    let mut passed = rows.iter().all(|row| row.n_seeds == n_seeds) && n_seeds == 5;
    let mut parts = Vec::new();
    for p in [0.4, 0.6] {
        let (a, b) = (cell(rows, m, p), cell(rows, r, p));
        passed &= a >= b - 0.5;
        parts.push(format!("p={p}: molpeg {a:.2} vs random {b:.2}"));
    }
    for s in [m, r] {
        let (hi, lo) = (cell(rows, s, 0.2), cell(rows, s, 0.9));
        passed &= lo <= hi + 1.0;
        parts.push(format!("{s}: {hi:.2} at 0.2, {lo:.2} at 0.9"));
    }
    passed &= elapsed < Duration::from_secs(15 * 60);
    parts.push(format!("{:.1}s", elapsed.as_secs_f64()));
    (passed, parts.join("; "))
}

fn main() {
    let config = ExperimentConfig::default();
    let mut outcomes = Vec::new();
    let mut record = |id, name, (passed, detail): (bool, String)| {
        outcomes.push(Outcome {
            id,
            name,
            passed,
            detail,
        })
    };

    record(1, "gradient matches central differences", gradient_oracle());

    let prepared = prepare(&config).unwrap();
    let base = theory_base(&config);
    let steps = config.verify.steps;
    let run = instrument(&prepared, &base, steps);
    record(2, "EMA displacement identity", identity(&run));
    record(3, "reference drift bound", drift(&prepared, &base, steps));
    record(
        4,
        "Taylor residual quadratic scaling",
        scaling(&prepared, &config),
    );
    record(5, "projection coefficient signs", projection_signs(&run));
    record(6, "Cauchy-Schwarz bound", cauchy_schwarz(&run));
    record(7, "metric oracles", metric_oracles());

    let dir = TempDir::new().unwrap();
    let (first, second) = (dir.path().join("first"), dir.path().join("second"));
    let start = Instant::now();
    let summary = sweep(&ExperimentConfig {
        out: first.clone(),
        ..config.clone()
    })
    .unwrap();
    let elapsed = start.elapsed();
    let audit = &summary.selection_audit;
    record(
        8,
        "selection contract",
        (
            audit.violations == 0 && audit.decisions > 0 && summary.failed == 0,
            format!(
                "{} decisions, {} violations",
                audit.decisions, audit.violations
            ),
        ),
    );

    sweep(&ExperimentConfig {
        out: second.clone(),
        ..config.clone()
    })
    .unwrap();
    let a = fs::read(first.join("runs.csv")).unwrap();
    let b = fs::read(second.join("runs.csv")).unwrap();
    record(
        9,
        "sweep determinism",
        (
            a == b,
            format!("runs.csv {} bytes, identical: {}", a.len(), a == b),
        ),
    );

    let rows = read_run_rows(&first.join("runs.csv")).unwrap();
    let aggregate = aggregate_rows(&rows).unwrap();
    record(
        10,
        "qualitative trend",
        trend(&aggregate, config.sweep.seeds.len(), elapsed),
    );

    let worst = rows
        .iter()
        .map(|r| ((r.time_efficiency - 1000.0 / r.wall_time_seconds) / r.time_efficiency).abs())
        .fold(0.0f64, f64::max);
    record(
        11,
        "time efficiency is 1000 / runtime",
        (
            worst <= f64::EPSILON && !rows.is_empty(),
            format!("{} rows, max relative deviation {worst:.1e}", rows.len()),
        ),
    );

    for o in &outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} criterion {:>2}: {} ({})", o.id, o.name, o.detail);
    }
    let failed: Vec<usize> = outcomes
        .iter()
        .filter(|o| !o.passed)
        .map(|o| o.id)
        .collect();
    if !failed.is_empty() {
        eprintln!("failing criteria: {failed:?}");
        std::process::exit(1);
    }
}
