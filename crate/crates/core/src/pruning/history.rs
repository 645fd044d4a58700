use std::collections::VecDeque;

use crate::error::{check_len, Error, Result};
use crate::model::ParameterVector;

pub const DEFAULT_TRUNCATION_TOL: f64 = 1e-9;

/// Record of past selected-subset average gradients.
///
/// Queried at step `t`, the history yields the EMA gradient
/// `sum_k (1 - beta)^(t - k) * g_k` over recorded entries `(g_k, k)`.
/// Entries whose weight at the next step falls below `truncation_tol` are
/// dropped as new ones arrive.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientHistory {
    entries: VecDeque<(ParameterVector, u64)>,
    beta: f64,
    truncation_tol: f64,
    dim: usize,
}

impl GradientHistory {
    pub fn new(dim: usize, beta: f64, truncation_tol: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&beta) {
            return Err(Error::precondition(format!(
                "beta must lie in [0, 1], got {beta}"
            )));
        }
        if truncation_tol.is_nan() || truncation_tol < 0.0 {
            return Err(Error::precondition("truncation_tol must be non-negative"));
        }
        Ok(Self {
            entries: VecDeque::new(),
            beta,
            truncation_tol,
            dim,
        })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn last_step(&self) -> Option<u64> {
        self.entries.back().map(|(_, s)| *s)
    }

    pub fn entries(&self) -> impl Iterator<Item = (u64, &ParameterVector)> {
        self.entries.iter().map(|(g, s)| (*s, g))
    }

    fn weight(&self, lag: u64) -> f64 {
        (1.0 - self.beta).powi(lag.min(i32::MAX as u64) as i32)
    }

    pub fn accumulate(&mut self, avg_gradient: ParameterVector, step: u64) -> Result<()> {
        check_len("history gradient", self.dim, avg_gradient.len())?;
        if let Some(last) = self.last_step() {
            if step <= last {
                return Err(Error::precondition(format!(
                    "history step {step} does not follow last recorded step {last}"
                )));
            }
        }
        self.entries.push_back((avg_gradient, step));
        let next = step + 1;
        while let Some((_, oldest)) = self.entries.front() {
            if self.weight(next - oldest) < self.truncation_tol {
                self.entries.pop_front();
            } else {
                break;
            }
        }
        Ok(())
    }

    pub fn ema_gradient(&self, current_step: u64) -> Result<ParameterVector> {
        let mut out = ParameterVector::zeros(self.dim);
        for (g, step) in &self.entries {
            if *step >= current_step {
                return Err(Error::precondition(format!(
                    "query step {current_step} does not follow recorded step {step}"
                )));
            }
            out.add_scaled(self.weight(current_step - step), g);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(values: &[f64]) -> ParameterVector {
        values.to_vec().into()
    }

    #[test]
    fn single_term() {
        let mut h = GradientHistory::new(2, 0.5, 0.0).unwrap();
        h.accumulate(v(&[2.0, -4.0]), 0).unwrap();
        assert_eq!(h.ema_gradient(1).unwrap(), v(&[1.0, -2.0]));
    }

    #[test]
    fn two_terms_direct_sum() {
        let g0 = v(&[1.0, 3.0]);
        let g1 = v(&[-2.0, 0.5]);
        let mut h = GradientHistory::new(2, 0.5, 0.0).unwrap();
        h.accumulate(g0.clone(), 0).unwrap();
        h.accumulate(g1.clone(), 1).unwrap();
        let expected: Vec<f64> = (0..2)
            .map(|i| 0.25 * g0.as_slice()[i] + 0.5 * g1.as_slice()[i])
            .collect();
        assert_eq!(h.ema_gradient(2).unwrap().as_slice(), expected.as_slice());
    }

    #[test]
    fn full_pace_gives_zero() {
        let mut h = GradientHistory::new(2, 1.0, DEFAULT_TRUNCATION_TOL).unwrap();
        for step in 0..5 {
            h.accumulate(v(&[1.0, 1.0]), step).unwrap();
        }
        assert_eq!(h.ema_gradient(5).unwrap(), v(&[0.0, 0.0]));
        let mut untruncated = GradientHistory::new(2, 1.0, 0.0).unwrap();
        untruncated.accumulate(v(&[3.0, 1.0]), 0).unwrap();
        assert_eq!(untruncated.ema_gradient(1).unwrap(), v(&[0.0, 0.0]));
    }

    #[test]
    fn out_of_order_steps_are_rejected() {
        let mut h = GradientHistory::new(1, 0.5, 0.0).unwrap();
        h.accumulate(v(&[1.0]), 3).unwrap();
        assert!(h.accumulate(v(&[1.0]), 3).is_err());
        assert!(h.accumulate(v(&[1.0]), 2).is_err());
        assert!(h.ema_gradient(3).is_err());
        assert!(h.accumulate(v(&[1.0, 2.0]), 4).is_err());
    }

    #[test]
    fn truncation_drops_negligible_tail() {
        let mut h = GradientHistory::new(1, 0.5, 1e-3).unwrap();
        for step in 0..50 {
            h.accumulate(v(&[1.0]), step).unwrap();
        }
        // 0.5^j >= 1e-3 for j <= 9.
        assert_eq!(h.len(), 9);
        assert!(h.entries().all(|(s, _)| 50 - s <= 9));
    }

    #[test]
    fn empty_history_is_zero() {
        let h = GradientHistory::new(3, 0.5, 0.0).unwrap();
        assert_eq!(h.ema_gradient(0).unwrap(), v(&[0.0, 0.0, 0.0]));
    }
}
