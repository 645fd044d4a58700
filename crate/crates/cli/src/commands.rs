use std::collections::BTreeMap;
use std::path::Path;

use dynprune_core::data::{write_csv_to, CsvSchema};
use dynprune_core::metrics::aggregate_seeds;
use dynprune_core::model::{Activation, Task};
use dynprune_core::theory::{
    check_drift_bound, check_first_order, check_grand_bound, check_projection,
    displacement_identity_error, residual_scaling, run_instrumented, sign_test, InstrumentedRun,
    SelectionBasis,
};
use dynprune_core::trainer::{Optimizer, SelectionMode, TrainConfig};
use dynprune_core::ScorerKind;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{DataConfig, ExperimentConfig};
use crate::experiment::{
    generate_datasets, prepare, run_cell, CellKey, CellResult, PretrainSummary, SelectionAudit,
};
use crate::output::{write_atomic, write_csv_rows, write_json, write_jsonl};
use crate::CliError;

pub const CONFIG_FILE: &str = "config.json";

fn echo_config(config: &ExperimentConfig) -> Result<(), CliError> {
    write_json(&config.out.join(CONFIG_FILE), config)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub seed: u64,
    pub means_seed: u64,
    pub source_seed: u64,
    pub target_seed: u64,
    pub shift_seed: u64,
    pub label_column: String,
    pub source_file: String,
    pub target_file: String,
    pub source_rows: usize,
    pub target_rows: usize,
    pub n_features: usize,
    pub n_classes: usize,
    pub recipe: crate::config::GeneratedData,
}

/// Writes `source.csv`, `target.csv` and `manifest.json` for a generated
/// recipe.
pub fn gen_data(config: &ExperimentConfig) -> Result<DataManifest, CliError> {
    let DataConfig::Generated(g) = &config.data else {
        return Err(CliError::Config(
            "gen-data needs a generated data recipe".into(),
        ));
    };
    let (source, target) = generate_datasets(g)?;
    let schema = CsvSchema::new("label", Task::Classification);
    for (name, ds) in [("source.csv", &source), ("target.csv", &target)] {
        let mut bytes = Vec::new();
        write_csv_to(ds, &mut bytes, &schema)?;
        write_atomic(&config.out.join(name), &bytes)?;
    }
    let manifest = DataManifest {
        seed: g.seed,
        means_seed: g.means_seed(),
        source_seed: g.source_seed(),
        target_seed: g.target_seed(),
        shift_seed: g.shift_seed(),
        label_column: schema.label_column,
        source_file: "source.csv".into(),
        target_file: "target.csv".into(),
        source_rows: source.len(),
        target_rows: target.len(),
        n_features: g.n_features,
        n_classes: g.n_classes,
        recipe: g.clone(),
    };
    write_json(&config.out.join("manifest.json"), &manifest)?;
    echo_config(config)?;
    Ok(manifest)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub scorer: ScorerKind,
    pub pruning_ratio: f64,
    pub beta: f64,
    pub seed: u64,
    pub selection_mode: SelectionMode,
    pub optimizer: Optimizer,
    pub metric: String,
    pub val_metric: f64,
    pub test_metric: f64,
    pub wall_time_seconds: f64,
    pub time_efficiency: f64,
    pub epochs: usize,
    pub selection_audit: SelectionAudit,
    pub pretrain: Option<PretrainSummary>,
}

/// One finetuning run: `config.json`, `epochs.jsonl`, `metrics.json`.
pub fn train(config: &ExperimentConfig) -> Result<RunMetrics, CliError> {
    echo_config(config)?;
    let prepared = prepare(config)?;
    let mut audit = SelectionAudit::default();
    let cell = run_cell(
        &prepared,
        &config.train,
        CellKey::of(&config.train),
        Some(&mut audit),
    )?;
    write_jsonl(&config.out.join("epochs.jsonl"), &cell.records)?;
    let metrics = RunMetrics {
        scorer: cell.key.scorer,
        pruning_ratio: cell.key.pruning_ratio,
        beta: cell.key.beta,
        seed: cell.key.seed,
        selection_mode: config.train.selection_mode,
        optimizer: config.train.optimizer,
        metric: cell.metric,
        val_metric: cell.val_metric,
        test_metric: cell.test_metric,
        wall_time_seconds: cell.wall_time_seconds,
        time_efficiency: cell.time_efficiency,
        epochs: cell.records.len(),
        selection_audit: audit,
        pretrain: prepared.pretrain,
    };
    write_json(&config.out.join("metrics.json"), &metrics)?;
    Ok(metrics)
}

pub const RUNS_HEADER: [&str; 8] = [
    "scorer",
    "pruning_ratio",
    "beta",
    "seed",
    "val_metric",
    "test_metric",
    "wall_time_seconds",
    "time_efficiency",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub scorer: ScorerKind,
    pub pruning_ratio: f64,
    pub beta: f64,
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub wall_time_seconds: f64,
    pub time_efficiency: f64,
}

impl From<&CellResult> for RunRow {
    fn from(c: &CellResult) -> Self {
        Self {
            scorer: c.key.scorer,
            pruning_ratio: c.key.pruning_ratio,
            beta: c.key.beta,
            seed: c.key.seed,
            val_metric: c.val_metric,
            test_metric: c.test_metric,
            wall_time_seconds: c.wall_time_seconds,
            time_efficiency: c.time_efficiency,
        }
    }
}

pub const AGGREGATE_HEADER: [&str; 12] = [
    "scorer",
    "pruning_ratio",
    "beta",
    "n_seeds",
    "val_mean",
    "val_std",
    "test_mean",
    "test_std",
    "wall_time_mean",
    "wall_time_std",
    "time_efficiency_mean",
    "time_efficiency_std",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub scorer: ScorerKind,
    pub pruning_ratio: f64,
    pub beta: f64,
    pub n_seeds: usize,
    pub val_mean: f64,
    pub val_std: f64,
    pub test_mean: f64,
    pub test_std: f64,
    pub wall_time_mean: f64,
    pub wall_time_std: f64,
    pub time_efficiency_mean: f64,
    pub time_efficiency_std: f64,
}

/// Mean and sample standard deviation over seeds for each
/// (scorer, pruning_ratio, beta) cell, in order of first appearance.
pub fn aggregate_rows(rows: &[RunRow]) -> Result<Vec<AggregateRow>, CliError> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<(ScorerKind, u64, u64), Vec<&RunRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.scorer, r.pruning_ratio.to_bits(), r.beta.to_bits());
        let group = groups.entry(key).or_default();
        if group.is_empty() {
            order.push(key);
        }
        group.push(r);
    }
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let stat = |f: fn(&RunRow) -> f64| {
                aggregate_seeds(&g.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (val_mean, val_std) = stat(|r| r.val_metric)?;
            let (test_mean, test_std) = stat(|r| r.test_metric)?;
            let (wall_time_mean, wall_time_std) = stat(|r| r.wall_time_seconds)?;
            let (time_efficiency_mean, time_efficiency_std) = stat(|r| r.time_efficiency)?;
            Ok(AggregateRow {
                scorer: g[0].scorer,
                pruning_ratio: g[0].pruning_ratio,
                beta: g[0].beta,
                n_seeds: g.len(),
                val_mean,
                val_std,
                test_mean,
                test_std,
                wall_time_mean,
                wall_time_std,
                time_efficiency_mean,
                time_efficiency_std,
            })
        })
        .collect()
}

pub fn read_run_rows(path: &Path) -> Result<Vec<RunRow>, CliError> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
    reader
        .deserialize()
        .collect::<Result<Vec<RunRow>, _>>()
        .map_err(|e| CliError::Run(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub scorer: ScorerKind,
    pub pruning_ratio: f64,
    pub beta: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub cells: usize,
    pub completed: usize,
    pub failed: usize,
    pub metric: String,
    pub selection_audit: SelectionAudit,
    pub pretrain: Option<PretrainSummary>,
}

pub fn grid(config: &ExperimentConfig) -> Vec<CellKey> {
    let s = &config.sweep;
    let mut cells = Vec::new();
    for &scorer in &s.scorers {
        for &pruning_ratio in &s.pruning_ratios {
            for &beta in &s.betas {
                for &seed in &s.seeds {
                    cells.push(CellKey {
                        scorer,
                        pruning_ratio,
                        beta,
                        seed,
                    });
                }
            }
        }
    }
    cells
}

/// Runs the scorer x ratio x beta x seed grid. Failed cells are listed in
/// `failures.csv` and turn the result into an error after every file is
/// written.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepSummary, CliError> {
    echo_config(config)?;
    let prepared = prepare(config)?;
    let cells = grid(config);
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(jobs) = config.sweep.jobs {
        pool = pool.num_threads(jobs);
    }
    let pool = pool.build().map_err(|e| CliError::Run(e.to_string()))?;
    let outcomes: Vec<Result<(CellResult, SelectionAudit), String>> = pool.install(|| {
        cells
            .par_iter()
            .map(|key| {
                let mut audit = SelectionAudit::default();
                run_cell(&prepared, &config.train, *key, Some(&mut audit))
                    .map(|c| (c, audit))
                    .map_err(|e| e.to_string())
            })
            .collect()
    });

    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut audit = SelectionAudit::default();
    let mut metric = String::new();
    for (key, outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok((cell, cell_audit)) => {
                audit.merge(&cell_audit);
                metric = cell.metric.clone();
                rows.push(RunRow::from(&cell));
            }
            Err(error) => failures.push(FailedCell {
                scorer: key.scorer,
                pruning_ratio: key.pruning_ratio,
                beta: key.beta,
                seed: key.seed,
                error,
            }),
        }
    }
    write_csv_rows(&config.out.join("runs.csv"), &rows, &RUNS_HEADER)?;
    write_csv_rows(
        &config.out.join("aggregate.csv"),
        &aggregate_rows(&rows)?,
        &AGGREGATE_HEADER,
    )?;
    write_csv_rows(
        &config.out.join("failures.csv"),
        &failures,
        &["scorer", "pruning_ratio", "beta", "seed", "error"],
    )?;
    let summary = SweepSummary {
        cells: cells.len(),
        completed: rows.len(),
        failed: failures.len(),
        metric,
        selection_audit: audit,
        pretrain: prepared.pretrain,
    };
    write_json(&config.out.join("summary.json"), &summary)?;
    if summary.failed > 0 {
        return Err(CliError::Run(format!(
            "{} of {} sweep cells failed (see failures.csv)",
            summary.failed, summary.cells
        )));
    }
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub skipped: bool,
    pub measured: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub passed: bool,
    pub failures: Vec<String>,
    pub notices: Vec<String>,
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    pub checks: Vec<CheckResult>,
}

fn check(name: &str, passed: bool, measured: Value) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed,
        skipped: false,
        measured,
    }
}

fn skipped(name: &str, reason: &str) -> CheckResult {
    CheckResult {
        name: name.into(),
        passed: true,
        skipped: true,
        measured: json!({ "reason": reason }),
    }
}

fn identity_checks(run: &InstrumentedRun, tol: f64) -> Result<Vec<CheckResult>, CliError> {
    let mut max_unrolled: f64 = 0.0;
    let mut max_ema: f64 = 0.0;
    let mut worst = Vec::new();
    for t in 0..run.steps.len() {
        let unrolled = displacement_identity_error(run, t)?;
        let ema = check_first_order(run, t)?.identity_error;
        max_unrolled = max_unrolled.max(unrolled);
        max_ema = max_ema.max(ema);
        if unrolled > tol && worst.len() < 5 {
            worst.push(t);
        }
    }
    Ok(vec![
        check(
            "displacement_identity",
            max_unrolled <= tol,
            json!({ "max_error": max_unrolled, "tolerance": tol, "failing_steps": worst }),
        ),
        check(
            "ema_gradient_identity",
            max_ema <= tol,
            json!({ "max_error": max_ema, "tolerance": tol }),
        ),
    ])
}

fn projection_checks(
    run: &InstrumentedRun,
    config: &ExperimentConfig,
) -> Result<Vec<CheckResult>, CliError> {
    let v = &config.verify;
    let mut exact_failures = Vec::new();
    let mut a_values = Vec::new();
    let mut b_values = Vec::new();
    for t in 1..=v.sign_steps {
        let r = check_projection(run, t, SelectionBasis::FirstOrder)?;
        if !r.sign_pattern_holds(0.0) {
            exact_failures.push(t);
        }
        a_values.extend(r.a);
        b_values.extend(r.b);
    }
    let mut within = 0usize;
    let mut checked = 0usize;
    let mut c_values = Vec::new();
    let mut d_values = Vec::new();
    let mut min_a = f64::INFINITY;
    let mut max_b = f64::NEG_INFINITY;
    let mut degenerate = 0usize;
    for t in 1..run.steps.len() {
        let r = check_projection(run, t, SelectionBasis::Recorded)?;
        c_values.extend(r.c);
        d_values.extend(r.d);
        if r.drift_norm == 0.0 {
            degenerate += 1;
            continue;
        }
        checked += 1;
        if r.sign_pattern_holds(r.residual_budget) {
            within += 1;
        }
        min_a = r.a.map_or(min_a, |a| min_a.min(a));
        max_b = r.b.map_or(max_b, |b| max_b.max(b));
    }
    let fraction = if checked == 0 {
        1.0
    } else {
        within as f64 / checked as f64
    };
    let c_test = sign_test(c_values.iter().copied());
    let d_test = sign_test(d_values.iter().copied());
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok(vec![
        check(
            "projection_signs_first_order",
            exact_failures.is_empty(),
            json!({
                "steps": v.sign_steps,
                "failing_steps": exact_failures,
                "mean_a": mean(&a_values),
                "mean_b": mean(&b_values),
            }),
        ),
        check(
            "projection_signs_within_budget",
            fraction >= v.budget_pass_fraction,
            json!({
                "steps": checked,
                "zero_drift_steps": degenerate,
                "within_budget": within,
                "fraction": fraction,
                "required": v.budget_pass_fraction,
                "min_a": if min_a.is_finite() { Some(min_a) } else { None },
                "max_b": if max_b.is_finite() { Some(max_b) } else { None },
            }),
        ),
        check(
            "perpendicular_sign_balance",
            c_test.p_value >= v.sign_test_alpha && d_test.p_value >= v.sign_test_alpha,
            json!({ "c": c_test, "d": d_test, "alpha": v.sign_test_alpha }),
        ),
    ])
}

fn bound_checks(run: &InstrumentedRun) -> Result<Vec<CheckResult>, CliError> {
    let (mut samples, mut cs, mut lb, mut max_res) = (0usize, 0usize, 0usize, 0.0f64);
    for t in 0..run.steps.len() {
        let r = check_grand_bound(run, t)?;
        samples += r.records.len();
        cs += r.cauchy_schwarz_violations;
        lb += r.lower_bound_violations;
        max_res = max_res.max(check_first_order(run, t)?.max_abs_residual);
    }
    Ok(vec![
        check(
            "cauchy_schwarz",
            cs == 0,
            json!({ "samples": samples, "violations": cs }),
        ),
        check(
            "gradient_norm_lower_bound",
            lb == 0,
            json!({ "violations": lb, "max_abs_residual": max_res }),
        ),
    ])
}

/// Instrumented SGD runs with tanh activations, every theory check, and a
/// `theory_report.json`. Failing checks make the result an error after the
/// report is written.
pub fn verify(config: &ExperimentConfig) -> Result<TheoryReport, CliError> {
    let mut config = config.clone();
    let mut notices = Vec::new();
    if config.train.optimizer != Optimizer::Sgd {
        notices.push("optimizer forced to sgd for theory checks".to_string());
        config.train.optimizer = Optimizer::Sgd;
    }
    if config.model.activation != Activation::Tanh {
        notices.push("activation forced to tanh for theory checks".to_string());
        config.model.activation = Activation::Tanh;
    }
    if config.train.selection_mode != SelectionMode::Batch {
        notices.push("selection mode forced to batch for theory checks".to_string());
        config.train.selection_mode = SelectionMode::Batch;
    }
    notices.push(
        "reference is updated after the online step: xi_t mixes the post-step theta_t with xi_(t-1)".to_string(),
    );
    for n in &notices {
        eprintln!("notice: {n}");
    }
    echo_config(&config)?;
    let prepared = prepare(&config)?;
    let v = &config.verify;
    let base = TrainConfig {
        learning_rate: v.learning_rate,
        ..config.train.clone()
    };
    let instrument = |cfg: &TrainConfig, steps| {
        run_instrumented(&prepared.target, cfg, &prepared.spec, &prepared.init, steps)
            .map_err(CliError::from)
    };
    let run = instrument(&base, v.steps)?;
    let mut checks = identity_checks(&run, v.identity_tol)?;

    for &beta in &v.drift_betas {
        let name = format!("drift_bound_beta_{beta}");
        if beta >= 1.0 {
            let reason = "beta = 1 gives a zero bound; the reference equals the online model after every step";
            notices.push(format!("{name} skipped: {reason}"));
            checks.push(skipped(&name, reason));
            continue;
        }
        let drift_run = if beta == base.beta {
            run.clone()
        } else {
            instrument(
                &TrainConfig {
                    beta,
                    ..base.clone()
                },
                v.steps,
            )?
        };
        let report = check_drift_bound(&drift_run);
        checks.push(check(
            &name,
            report.violations == 0,
            json!({
                "violations": report.violations,
                "min_margin": report.min_margin,
                "final_drift": report.records.last().map(|r| r.drift),
                "final_bound": report.records.last().map(|r| r.closed_bound),
            }),
        ));
    }

    let scaling_cfg = TrainConfig {
        learning_rate: v.scaling_learning_rate,
        ..base.clone()
    };
    let scaling = residual_scaling(
        &prepared.target,
        &scaling_cfg,
        &prepared.spec,
        &prepared.init,
        v.scaling_steps,
    )?;
    match scaling.ratio {
        Some(ratio) => checks.push(check(
            "residual_quadratic_scaling",
            (v.scaling_range.0..=v.scaling_range.1).contains(&ratio),
            json!({ "ratio": ratio, "range": v.scaling_range, "report": scaling }),
        )),
        None => {
            let reason = "all Taylor residuals are zero";
            notices.push(format!("residual_quadratic_scaling skipped: {reason}"));
            checks.push(skipped("residual_quadratic_scaling", reason));
        }
    }

    checks.extend(projection_checks(&run, &config)?);
    checks.extend(bound_checks(&run)?);

    let failures: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed)
        .map(|c| c.name.clone())
        .collect();
    let report = TheoryReport {
        passed: failures.is_empty(),
        failures: failures.clone(),
        notices,
        beta: base.beta,
        learning_rate: base.learning_rate,
        steps: run.steps.len(),
        checks,
    };
    write_json(&config.out.join("theory_report.json"), &report)?;
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(CliError::Verify(failures))
    }
}
