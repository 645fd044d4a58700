//! Numerical checks of the first-order account of loss-discrepancy scoring.
//!
//! Under plain SGD with step `alpha` and reference pace `beta`, the reference
//! model trails the online model by exactly
//!
//! ```text
//! xi_t - theta_t = -sum_{j=1..t} (1 - beta)^j * dtheta_{t-j}
//!               =  alpha * sum_{j=1..t} (1 - beta)^j * g_{t-j}  =  alpha * v_t
//! ```
//!
//! where `g_k` is the selected-subset mean gradient at step `k` and `v_t` the
//! EMA gradient. A Taylor expansion then gives
//! `L(x, xi_t) - L(x, theta_t) = grad L(x, theta_t) . (xi_t - theta_t) + O(eps^2)`.
//!
//! The checks here replay instrumented training runs and measure each of
//! these statements: the displacement identity, the drift bound, the
//! quadratic scaling of the Taylor residual, the sign of the projection of
//! selected-minus-full gradients onto the EMA gradient, and the
//! Cauchy-Schwarz bound linking scores to gradient norms.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_loss, loss_and_gradient, ModelSpec, ParameterVector, Sample};
use crate::pruning::{keep_count, select_topk, PruneDecision};
use crate::trainer::{train, Optimizer, SelectionMode, StepEvent, StepObserver, TrainConfig};

/// Everything recorded at one batch step of an instrumented run.
#[derive(Debug, Clone)]
pub struct StepSnapshot {
    pub step: u64,
    /// `theta_t`
    pub online: ParameterVector,
    /// `xi_t`
    pub reference: ParameterVector,
    pub candidates: Vec<Sample>,
    pub decision: PruneDecision,
    /// `g_t`, mean gradient of the selected samples at `theta_t`.
    pub selected_gradient: ParameterVector,
    /// `theta_{t+1} - theta_t`
    pub update: ParameterVector,
    /// `v_t`, queried from the trainer's gradient history.
    pub ema_gradient: ParameterVector,
}

#[derive(Debug, Clone)]
pub struct InstrumentedRun {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub steps: Vec<StepSnapshot>,
}

struct Recorder {
    limit: usize,
    steps: Vec<StepSnapshot>,
    error: Option<Error>,
}

impl StepObserver for Recorder {
    fn on_step(&mut self, event: &StepEvent<'_>) {
        if self.steps.len() >= self.limit || self.error.is_some() {
            return;
        }
        match event.history.ema_gradient(event.step) {
            Ok(ema_gradient) => self.steps.push(StepSnapshot {
                step: event.step,
                online: event.pair.online().clone(),
                reference: event.pair.reference().clone(),
                candidates: event.candidates.iter().map(|s| (*s).clone()).collect(),
                decision: event.decision.clone(),
                selected_gradient: event.selected_gradient.clone(),
                update: event.updated_online.sub(event.pair.online()),
                ema_gradient,
            }),
            Err(e) => self.error = Some(e),
        }
    }
}

/// Trains with `config` (batch selection, untruncated gradient history)
/// just long enough to record the first `steps` batch steps.
pub fn run_instrumented(
    dataset: &Dataset,
    config: &TrainConfig,
    spec: &ModelSpec,
    init: &ParameterVector,
    steps: usize,
) -> Result<InstrumentedRun> {
    if config.selection_mode != SelectionMode::Batch {
        return Err(Error::precondition("instrumented runs use batch selection"));
    }
    let n_train = dataset.train().len();
    let per_epoch = n_train.div_ceil(config.batch_size.max(1)).max(1);
    let mut config = config.clone();
    config.epochs = steps.div_ceil(per_epoch).max(1);
    // Keep the whole gradient history so v_t is exact.
    config.history_truncation_tol = 0.0;
    let mut recorder = Recorder {
        limit: steps,
        steps: Vec::with_capacity(steps),
        error: None,
    };
    train(dataset, &config, spec, init, Some(&mut recorder))?;
    if let Some(e) = recorder.error {
        return Err(e);
    }
    Ok(InstrumentedRun {
        spec: spec.clone(),
        config,
        steps: recorder.steps,
    })
}

impl InstrumentedRun {
    fn require_sgd(&self) -> Result<()> {
        if self.config.optimizer == Optimizer::Sgd {
            Ok(())
        } else {
            Err(Error::UnsupportedTask {
                scorer: "theory check".into(),
                task: "adam-trained".into(),
            })
        }
    }

    fn snapshot(&self, index: usize) -> Result<&StepSnapshot> {
        self.steps.get(index).ok_or_else(|| {
            Error::precondition(format!(
                "step {index} not recorded ({} available)",
                self.steps.len()
            ))
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate
    }

    pub fn beta(&self) -> f64 {
        self.config.beta
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderRecord {
    pub id: usize,
    /// `L(x, xi_t) - L(x, theta_t)`
    pub loss_discrepancy: f64,
    /// `grad L(x, theta_t) . (xi_t - theta_t)`
    pub first_order_term: f64,
    /// `alpha * grad L(x, theta_t) . v_t`
    pub first_order_ema_form: f64,
    /// `loss_discrepancy - first_order_term`
    pub residual: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderReport {
    pub step: u64,
    pub records: Vec<FirstOrderRecord>,
    pub mean_abs_residual: f64,
    pub max_abs_residual: f64,
    /// Largest `||dtheta_j||` over `j < t`.
    pub epsilon_proxy: f64,
    /// `||xi_t - theta_t||`
    pub drift_norm: f64,
    /// `||(xi_t - theta_t) - alpha * v_t||`
    pub identity_error: f64,
}

impl FirstOrderReport {
    pub fn identity_holds(&self, tol: f64) -> bool {
        self.identity_error <= tol
    }
}

/// Signed loss discrepancies and their first-order approximations for every
/// candidate of step `index`.
pub fn check_first_order(run: &InstrumentedRun, index: usize) -> Result<FirstOrderReport> {
    run.require_sgd()?;
    let snap = run.snapshot(index)?;
    let spec = &run.spec;
    let alpha = run.learning_rate();
    let displacement = snap.reference.sub(&snap.online);
    let identity_error = displacement.sub(&snap.ema_gradient.scaled(alpha)).norm();

    let mut records = Vec::with_capacity(snap.candidates.len());
    for s in &snap.candidates {
        let (online_loss, grad) = loss_and_gradient(&snap.online, s, spec)?;
        let reference_loss = forward_loss(&snap.reference, s, spec)?;
        let loss_discrepancy = reference_loss - online_loss;
        let first_order_term = grad.dot(&displacement);
        records.push(FirstOrderRecord {
            id: s.id,
            loss_discrepancy,
            first_order_term,
            first_order_ema_form: alpha * grad.dot(&snap.ema_gradient),
            residual: loss_discrepancy - first_order_term,
            gradient_norm: grad.norm(),
        });
    }
    let abs: Vec<f64> = records.iter().map(|r| r.residual.abs()).collect();
    Ok(FirstOrderReport {
        step: snap.step,
        mean_abs_residual: abs.iter().sum::<f64>() / abs.len().max(1) as f64,
        max_abs_residual: abs.iter().copied().fold(0.0, f64::max),
        epsilon_proxy: run.steps[..index]
            .iter()
            .map(|s| s.update.norm())
            .fold(0.0, f64::max),
        drift_norm: displacement.norm(),
        identity_error,
        records,
    })
}

/// `||xi_t - theta_t + sum_{j=1..t} (1 - beta)^j dtheta_{t-j}||` from the
/// recorded parameter updates (no history truncation involved).
pub fn displacement_identity_error(run: &InstrumentedRun, index: usize) -> Result<f64> {
    let snap = run.snapshot(index)?;
    let decay = 1.0 - run.beta();
    let mut residual = snap.reference.sub(&snap.online);
    for j in 1..=index {
        residual.add_scaled(decay.powi(j as i32), &run.steps[index - j].update);
    }
    Ok(residual.norm())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftRecord {
    pub step: u64,
    /// `||xi_t - theta_t||`
    pub drift: f64,
    /// Largest measured `||dtheta_j||`, `j < t`.
    pub max_update: f64,
    /// `sum_{j=1..t} (1 - beta)^j * max_update`
    pub series_bound: f64,
    /// `(1 - beta) / beta * max_update`
    pub closed_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub beta: f64,
    pub records: Vec<DriftRecord>,
    pub violations: usize,
    /// Smallest `closed_bound - drift` over steps after the first non-zero
    /// update; infinite when there is none.
    pub min_margin: f64,
}

/// Drift of the reference model against the closed-form bound
/// `(1 - beta) / beta * max_j ||dtheta_j||` at every recorded step.
pub fn check_drift_bound(run: &InstrumentedRun) -> DriftReport {
    let beta = run.beta();
    let decay = 1.0 - beta;
    let mut max_update: f64 = 0.0;
    let mut records = Vec::with_capacity(run.steps.len());
    for (t, snap) in run.steps.iter().enumerate() {
        if t > 0 {
            max_update = max_update.max(run.steps[t - 1].update.norm());
        }
        let geometric: f64 = (1..=t).map(|j| decay.powi(j as i32)).sum();
        let closed_bound = if max_update == 0.0 {
            0.0
        } else {
            decay / beta * max_update
        };
        records.push(DriftRecord {
            step: snap.step,
            drift: snap.reference.sub(&snap.online).norm(),
            max_update,
            series_bound: geometric * max_update,
            closed_bound,
        });
    }
    let violations = records
        .iter()
        .filter(|r| !(r.drift <= r.closed_bound))
        .count();
    let min_margin = records
        .iter()
        .filter(|r| r.max_update > 0.0)
        .map(|r| r.closed_bound - r.drift)
        .fold(f64::INFINITY, f64::min);
    DriftReport {
        beta,
        records,
        violations,
        min_margin,
    }
}

/// Which scores drive the selection analysed by [`check_projection`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionBasis {
    /// The decision the trainer actually made (loss discrepancies).
    Recorded,
    /// Re-selection on `|grad L(x, theta_t) . v_t|`.
    FirstOrder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub step: u64,
    pub basis: SelectionBasis,
    /// Projection of `mean grad(D^+ selected) - mean grad(D^+)` on the unit
    /// EMA gradient; absent when either set is empty.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// Same differences projected on a random unit direction orthogonal to
    /// the EMA gradient.
    pub c: Option<f64>,
    pub d: Option<f64>,
    pub plus: usize,
    pub selected_plus: usize,
    pub minus: usize,
    pub selected_minus: usize,
    /// `2 * max_abs_residual / ||xi_t - theta_t||`; bounds how far a and b
    /// may stray past zero when selection uses the true discrepancies.
    pub residual_budget: f64,
    /// `||xi_t - theta_t||`. At zero drift every score vanishes and the
    /// recorded selection says nothing about the EMA gradient.
    pub drift_norm: f64,
}

impl ProjectionReport {
    pub fn sign_pattern_holds(&self, tolerance: f64) -> bool {
        self.a.map_or(true, |a| a >= -tolerance) && self.b.map_or(true, |b| b <= tolerance)
    }
}

fn mean_over(values: &BTreeMap<usize, f64>, ids: &[usize]) -> Option<f64> {
    if ids.is_empty() {
        return None;
    }
    Some(ids.iter().map(|id| values[id]).sum::<f64>() / ids.len() as f64)
}

/// Random unit direction orthogonal to `unit`.
fn orthogonal_direction(unit: &ParameterVector, seed: u64) -> ParameterVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir = ParameterVector::from_vec(
        (0..unit.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect(),
    );
    let along = dir.dot(unit);
    dir.add_scaled(-along, unit);
    let norm = dir.norm();
    dir.scaled(1.0 / norm)
}

/// Projection coefficients of step `index`.
///
/// Coefficients are computed from per-sample projections (the projection of
/// a mean gradient is the mean of the projections), summed in candidate
/// order, so identical selected and full sets give exactly zero.
pub fn check_projection(
    run: &InstrumentedRun,
    index: usize,
    basis: SelectionBasis,
) -> Result<ProjectionReport> {
    let first_order = check_first_order(run, index)?;
    let snap = run.snapshot(index)?;
    let v_norm = snap.ema_gradient.norm();
    let residual_budget = if first_order.drift_norm > 0.0 {
        2.0 * first_order.max_abs_residual / first_order.drift_norm
    } else {
        0.0
    };
    let mut report = ProjectionReport {
        step: snap.step,
        basis,
        a: None,
        b: None,
        c: None,
        d: None,
        plus: 0,
        selected_plus: 0,
        minus: 0,
        selected_minus: 0,
        residual_budget,
        drift_norm: first_order.drift_norm,
    };
    if v_norm == 0.0 {
        return Ok(report);
    }
    let unit = snap.ema_gradient.scaled(1.0 / v_norm);
    let perp = orthogonal_direction(
        &unit,
        run.config.seed ^ snap.step.wrapping_mul(0x9E37_79B9_7F4A_7C15),
    );

    let mut along = BTreeMap::new();
    let mut across = BTreeMap::new();
    for s in &snap.candidates {
        let grad = loss_and_gradient(&snap.online, s, &run.spec)?.1;
        along.insert(s.id, grad.dot(&unit));
        across.insert(s.id, grad.dot(&perp));
    }
    let ids: Vec<usize> = snap.candidates.iter().map(|s| s.id).collect();

    let decision = match basis {
        SelectionBasis::Recorded => snap.decision.clone(),
        SelectionBasis::FirstOrder => {
            let scores: BTreeMap<usize, f64> = along.iter().map(|(k, v)| (*k, v.abs())).collect();
            let keep = keep_count(run.config.keep_fraction(), ids.len()) as f64 / ids.len() as f64;
            select_topk(&scores, &ids, keep)?
        }
    };

    let plus: Vec<usize> = ids.iter().copied().filter(|id| along[id] > 0.0).collect();
    let minus: Vec<usize> = ids.iter().copied().filter(|id| along[id] < 0.0).collect();
    let sel_plus: Vec<usize> = plus
        .iter()
        .copied()
        .filter(|id| decision.is_selected(*id))
        .collect();
    let sel_minus: Vec<usize> = minus
        .iter()
        .copied()
        .filter(|id| decision.is_selected(*id))
        .collect();

    let diff = |values: &BTreeMap<usize, f64>, sel: &[usize], all: &[usize]| {
        Some(mean_over(values, sel)? - mean_over(values, all)?)
    };
    report.a = diff(&along, &sel_plus, &plus);
    report.b = diff(&along, &sel_minus, &minus);
    report.c = diff(&across, &sel_plus, &plus);
    report.d = diff(&across, &sel_minus, &minus);
    report.plus = plus.len();
    report.minus = minus.len();
    report.selected_plus = sel_plus.len();
    report.selected_minus = sel_minus.len();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandBoundRecord {
    pub id: usize,
    pub selected: bool,
    pub gradient_norm: f64,
    pub abs_first_order: f64,
    /// `(score - |residual|) / ||xi_t - theta_t||`, absent at zero drift.
    pub implied_lower_bound: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrandBoundReport {
    pub step: u64,
    pub drift_norm: f64,
    pub records: Vec<GrandBoundRecord>,
    /// Candidates with `|g . (xi - theta)| > ||g|| ||xi - theta||`.
    pub cauchy_schwarz_violations: usize,
    /// Selected samples whose implied bound exceeds their gradient norm.
    pub lower_bound_violations: usize,
}

/// Cauchy-Schwarz on every candidate, and the gradient-norm lower bound
/// implied by each selected sample's score.
pub fn check_grand_bound(run: &InstrumentedRun, index: usize) -> Result<GrandBoundReport> {
    let first_order = check_first_order(run, index)?;
    let snap = run.snapshot(index)?;
    let drift = first_order.drift_norm;
    let mut records = Vec::with_capacity(first_order.records.len());
    let (mut cs_violations, mut lb_violations) = (0, 0);
    for r in &first_order.records {
        let selected = snap.decision.is_selected(r.id);
        let abs_first_order = r.first_order_term.abs();
        if abs_first_order > r.gradient_norm * drift {
            cs_violations += 1;
        }
        let implied_lower_bound =
            (drift > 0.0).then(|| (r.loss_discrepancy.abs() - r.residual.abs()) / drift);
        if selected && implied_lower_bound.is_some_and(|lb| lb > r.gradient_norm) {
            lb_violations += 1;
        }
        records.push(GrandBoundRecord {
            id: r.id,
            selected,
            gradient_norm: r.gradient_norm,
            abs_first_order,
            implied_lower_bound,
        });
    }
    Ok(GrandBoundReport {
        step: snap.step,
        drift_norm: drift,
        records,
        cauchy_schwarz_violations: cs_violations,
        lower_bound_violations: lb_violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub learning_rate: f64,
    pub steps: usize,
    pub mean_abs_residual: f64,
    pub mean_abs_residual_half: f64,
    /// `mean_abs_residual / mean_abs_residual_half`; absent when the
    /// half-rate residual is zero.
    pub ratio: Option<f64>,
}

fn mean_abs_residual_over_run(run: &InstrumentedRun) -> Result<f64> {
    let (mut total, mut count) = (0.0, 0usize);
    for index in 0..run.steps.len() {
        for r in check_first_order(run, index)?.records {
            total += r.residual.abs();
            count += 1;
        }
    }
    Ok(if count == 0 {
        0.0
    } else {
        total / count as f64
    })
}

/// Mean absolute Taylor residual of matched runs at `alpha` and `alpha / 2`.
/// The residual is second order in the step size, so the ratio tends to 4.
pub fn residual_scaling(
    dataset: &Dataset,
    config: &TrainConfig,
    spec: &ModelSpec,
    init: &ParameterVector,
    steps: usize,
) -> Result<ScalingReport> {
    let full = run_instrumented(dataset, config, spec, init, steps)?;
    let half_config = TrainConfig {
        learning_rate: config.learning_rate / 2.0,
        ..config.clone()
    };
    let half = run_instrumented(dataset, &half_config, spec, init, steps)?;
    let mean_abs_residual = mean_abs_residual_over_run(&full)?;
    let mean_abs_residual_half = mean_abs_residual_over_run(&half)?;
    Ok(ScalingReport {
        learning_rate: config.learning_rate,
        steps,
        mean_abs_residual,
        mean_abs_residual_half,
        ratio: (mean_abs_residual_half > 0.0).then(|| mean_abs_residual / mean_abs_residual_half),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    /// Two-sided exact binomial p-value under `P(positive) = 1/2`.
    pub p_value: f64,
}

/// Exact two-sided sign test on the non-zero values.
pub fn sign_test(values: impl IntoIterator<Item = f64>) -> SignTest {
    let (mut positive, mut negative) = (0usize, 0usize);
    for v in values {
        if v > 0.0 {
            positive += 1;
        } else if v < 0.0 {
            negative += 1;
        }
    }
    let n = positive + negative;
    let k = positive.min(negative);
    // P(X <= k) for X ~ Binomial(n, 1/2), accumulated in log space.
    let ln_half_n = n as f64 * 0.5f64.ln();
    let mut ln_choose = 0.0f64;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            ln_choose += ((n - i + 1) as f64).ln() - (i as f64).ln();
        }
        tail += (ln_choose + ln_half_n).exp();
    }
    SignTest {
        positive,
        negative,
        p_value: (2.0 * tail).min(1.0),
    }
}

/// Central-difference gradient of the loss with respect to every parameter.
pub fn finite_difference_oracle(
    params: &ParameterVector,
    sample: &Sample,
    spec: &ModelSpec,
    step_size: f64,
) -> Result<ParameterVector> {
    if !(step_size > 0.0) {
        return Err(Error::precondition(
            "finite-difference step must be positive",
        ));
    }
    let mut probe = params.clone();
    let mut grad = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let original = probe.as_slice()[i];
        probe.as_mut_slice()[i] = original + step_size;
        let plus = forward_loss(&probe, sample, spec)?;
        probe.as_mut_slice()[i] = original - step_size;
        let minus = forward_loss(&probe, sample, spec)?;
        probe.as_mut_slice()[i] = original;
        grad.push((plus - minus) / (2.0 * step_size));
    }
    Ok(ParameterVector::from_vec(grad))
}

/// `|a - b| / max(|a|, |b|, 1e-3)`: relative error, with coordinates below
/// 1e-3 judged on an absolute scale.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_test_values() {
        let t = sign_test([1.0, -1.0, 2.0, -3.0]);
        assert_eq!((t.positive, t.negative), (2, 2));
        assert_eq!(t.p_value, 1.0);
        // 10 of 10 positive: p = 2 / 1024
        let all = sign_test(std::iter::repeat(1.0).take(10));
        assert!((all.p_value - 2.0 / 1024.0).abs() < 1e-15);
        // 2 of 10: P(X <= 2) = (1 + 10 + 45) / 1024
        let mut v = vec![1.0; 2];
        v.extend(std::iter::repeat(-1.0).take(8));
        assert!((sign_test(v).p_value - 2.0 * 56.0 / 1024.0).abs() < 1e-15);
        assert_eq!(sign_test([0.0, 0.0]).p_value, 1.0);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }
}
